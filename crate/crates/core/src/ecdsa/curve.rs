//! Short-Weierstrass curves over prime fields with the textbook leaky
//! double-and-add scalar multiplication.
//!
//! Points are affine at the API boundary. Scalar multiplication runs in
//! Jacobian coordinates (x = X/Z², y = Y/Z³) with a mixed Jacobian-affine
//! addition, one inversion at the end.

use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, Zero};

use super::EcError;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Point {
    Infinity,
    Affine { x: BigUint, y: BigUint },
}

impl Point {
    pub fn affine(x: impl Into<BigUint>, y: impl Into<BigUint>) -> Self {
        Point::Affine {
            x: x.into(),
            y: y.into(),
        }
    }

    pub fn is_infinity(&self) -> bool {
        matches!(self, Point::Infinity)
    }

    pub fn x(&self) -> Option<&BigUint> {
        match self {
            Point::Infinity => None,
            Point::Affine { x, .. } => Some(x),
        }
    }

    pub fn y(&self) -> Option<&BigUint> {
        match self {
            Point::Infinity => None,
            Point::Affine { y, .. } => Some(y),
        }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Point::Infinity => f.write_str("infinity"),
            Point::Affine { x, y } => write!(f, "({x:x}, {y:x})"),
        }
    }
}

/// One iteration of the scalar-multiplication loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    /// Doubling only: a 0 bit.
    D,
    /// Doubling then addition: a 1 bit.
    DA,
}

impl Op {
    pub fn bit(&self) -> u8 {
        match self {
            Op::D => 0,
            Op::DA => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Op::D => "D",
            Op::DA => "DA",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// y² = x³ + ax + b over GF(p), generated by `g` of prime order `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurveParams {
    pub name: String,
    pub p: BigUint,
    pub a: BigUint,
    pub b: BigUint,
    pub g: Point,
    pub n: BigUint,
}

fn hex(s: &str) -> BigUint {
    BigUint::parse_bytes(s.as_bytes(), 16).expect("valid hex constant")
}

#[derive(Debug, Clone)]
struct Jacobian {
    x: BigUint,
    y: BigUint,
    z: BigUint,
}

impl Jacobian {
    fn infinity() -> Self {
        Jacobian {
            x: BigUint::one(),
            y: BigUint::one(),
            z: BigUint::zero(),
        }
    }

    fn is_infinity(&self) -> bool {
        self.z.is_zero()
    }
}

impl CurveParams {
    /// Builds a curve, checking that `g` lies on it and `[n]g` is the
    /// identity.
    pub fn new(
        name: impl Into<String>,
        p: BigUint,
        a: BigUint,
        b: BigUint,
        g: (BigUint, BigUint),
        n: BigUint,
    ) -> Result<Self, EcError> {
        let name = name.into();
        if p < BigUint::from(3u8) || n < BigUint::from(2u8) {
            return Err(EcError::InvalidCurve(format!("{name}: modulus or order too small")));
        }
        let curve = CurveParams {
            name,
            a: a % &p,
            b: b % &p,
            p,
            g: Point::affine(g.0, g.1),
            n,
        };
        if !curve.is_on_curve(&curve.g) {
            return Err(EcError::InvalidCurve(format!("{}: generator is not on the curve", curve.name)));
        }
        if !curve.double_and_add(&curve.g, &curve.n).is_infinity() {
            return Err(EcError::InvalidCurve(format!(
                "{}: [n]G is not the point at infinity",
                curve.name
            )));
        }
        Ok(curve)
    }

    /// NIST P-256.
    pub fn p256() -> Self {
        Self::new(
            "p256",
            hex("ffffffff00000001000000000000000000000000ffffffffffffffffffffffff"),
            hex("ffffffff00000001000000000000000000000000fffffffffffffffffffffffc"),
            hex("5ac635d8aa3a93e7b3ebbd55769886bc651d06b0cc53b0f63bce3c3e27d2604b"),
            (
                hex("6b17d1f2e12c4247f8bce6e563a440f277037d812deb33a0f4a13945d898c296"),
                hex("4fe342e2fe1a7f9b8ee7eb4a7c0f9e162bce33576b315ececbb6406837bf51f5"),
            ),
            hex("ffffffff00000000ffffffffffffffffbce6faada7179e84f3b9cac2fc632551"),
        )
        .expect("P-256 constants are valid")
    }

    /// y² = x³ + 2x + 2 over GF(17), G = (5, 1) of order 19.
    pub fn toy17() -> Self {
        Self::new(
            "toy17",
            17u8.into(),
            2u8.into(),
            2u8.into(),
            (5u8.into(), 1u8.into()),
            19u8.into(),
        )
        .expect("toy curve constants are valid")
    }

    pub fn by_name(name: &str) -> Result<Self, EcError> {
        match name {
            "p256" | "P-256" => Ok(Self::p256()),
            "toy17" | "toy-17" => Ok(Self::toy17()),
            other => Err(EcError::UnknownCurve(other.to_string())),
        }
    }

    fn add_mod(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a + b) % &self.p
    }

    fn sub_mod(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a + &self.p - (b % &self.p)) % &self.p
    }

    fn mul_mod(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.p
    }

    fn inv_mod(&self, a: &BigUint) -> BigUint {
        a.modinv(&self.p).expect("nonzero element of a prime field is invertible")
    }

    pub fn is_on_curve(&self, point: &Point) -> bool {
        match point {
            Point::Infinity => true,
            Point::Affine { x, y } => {
                if x >= &self.p || y >= &self.p {
                    return false;
                }
                let lhs = self.mul_mod(y, y);
                let x3 = self.mul_mod(&self.mul_mod(x, x), x);
                let rhs = self.add_mod(&self.add_mod(&x3, &self.mul_mod(&self.a, x)), &self.b);
                lhs == rhs
            }
        }
    }

    fn check(&self, point: &Point) -> Result<(), EcError> {
        if self.is_on_curve(point) {
            Ok(())
        } else {
            Err(EcError::NotOnCurve(point.to_string()))
        }
    }

    pub fn negate(&self, point: &Point) -> Point {
        match point {
            Point::Infinity => Point::Infinity,
            Point::Affine { x, y } => Point::Affine {
                x: x.clone(),
                y: self.sub_mod(&BigUint::zero(), y),
            },
        }
    }

    fn to_jacobian(&self, point: &Point) -> Jacobian {
        match point {
            Point::Infinity => Jacobian::infinity(),
            Point::Affine { x, y } => Jacobian {
                x: x.clone(),
                y: y.clone(),
                z: BigUint::one(),
            },
        }
    }

    fn to_affine(&self, j: &Jacobian) -> Point {
        if j.is_infinity() {
            return Point::Infinity;
        }
        let zinv = self.inv_mod(&j.z);
        let zinv2 = self.mul_mod(&zinv, &zinv);
        let zinv3 = self.mul_mod(&zinv2, &zinv);
        Point::Affine {
            x: self.mul_mod(&j.x, &zinv2),
            y: self.mul_mod(&j.y, &zinv3),
        }
    }

    fn jacobian_double(&self, p: &Jacobian) -> Jacobian {
        if p.is_infinity() || p.y.is_zero() {
            return Jacobian::infinity();
        }
        let y2 = self.mul_mod(&p.y, &p.y);
        let s = self.mul_mod(&(BigUint::from(4u8) * &p.x), &y2);
        let z2 = self.mul_mod(&p.z, &p.z);
        let z4 = self.mul_mod(&z2, &z2);
        let m = self.add_mod(
            &self.mul_mod(&BigUint::from(3u8), &self.mul_mod(&p.x, &p.x)),
            &self.mul_mod(&self.a, &z4),
        );
        let x3 = self.sub_mod(&self.mul_mod(&m, &m), &self.add_mod(&s, &s));
        let y4 = self.mul_mod(&y2, &y2);
        let y3 = self.sub_mod(
            &self.mul_mod(&m, &self.sub_mod(&s, &x3)),
            &self.mul_mod(&BigUint::from(8u8), &y4),
        );
        let z3 = self.mul_mod(&BigUint::from(2u8), &self.mul_mod(&p.y, &p.z));
        Jacobian { x: x3, y: y3, z: z3 }
    }

    /// P + Q with P Jacobian and Q affine.
    fn jacobian_affine_point_add(&self, p: &Jacobian, q: &Point) -> Jacobian {
        let (qx, qy) = match q {
            Point::Infinity => return p.clone(),
            Point::Affine { x, y } => (x, y),
        };
        if p.is_infinity() {
            return self.to_jacobian(q);
        }
        let z2 = self.mul_mod(&p.z, &p.z);
        let u2 = self.mul_mod(qx, &z2);
        let s2 = self.mul_mod(qy, &self.mul_mod(&z2, &p.z));
        let h = self.sub_mod(&u2, &p.x);
        let r = self.sub_mod(&s2, &p.y);
        if h.is_zero() {
            return if r.is_zero() {
                self.jacobian_double(p)
            } else {
                Jacobian::infinity()
            };
        }
        let h2 = self.mul_mod(&h, &h);
        let h3 = self.mul_mod(&h2, &h);
        let x1h2 = self.mul_mod(&p.x, &h2);
        let x3 = self.sub_mod(
            &self.sub_mod(&self.mul_mod(&r, &r), &h3),
            &self.add_mod(&x1h2, &x1h2),
        );
        let y3 = self.sub_mod(
            &self.mul_mod(&r, &self.sub_mod(&x1h2, &x3)),
            &self.mul_mod(&p.y, &h3),
        );
        let z3 = self.mul_mod(&p.z, &h);
        Jacobian { x: x3, y: y3, z: z3 }
    }

    pub fn point_add(&self, p: &Point, q: &Point) -> Result<Point, EcError> {
        self.check(p)?;
        self.check(q)?;
        let sum = self.jacobian_affine_point_add(&self.to_jacobian(p), q);
        Ok(self.to_affine(&sum))
    }

    pub fn point_double(&self, p: &Point) -> Result<Point, EcError> {
        self.check(p)?;
        Ok(self.to_affine(&self.jacobian_double(&self.to_jacobian(p))))
    }

    fn ladder(&self, point: &Point, k: &BigUint, mut record: impl FnMut(Op)) -> Point {
        if k.is_zero() || point.is_infinity() {
            return Point::Infinity;
        }
        let mut acc = self.to_jacobian(point);
        for i in (0..k.bits() - 1).rev() {
            acc = self.jacobian_double(&acc);
            if k.bit(i) {
                acc = self.jacobian_affine_point_add(&acc, point);
                record(Op::DA);
            } else {
                record(Op::D);
            }
        }
        self.to_affine(&acc)
    }

    /// [k]P for any k ≥ 0, including multiples that pass through the
    /// identity. `point` is assumed to be on the curve.
    pub fn double_and_add(&self, point: &Point, k: &BigUint) -> Point {
        self.ladder(point, k, |_| {})
    }

    /// [k]G for 0 < k < n together with the D/DA sequence the loop
    /// executes below the leading bit of k.
    pub fn scalar_mul_leaky(&self, k: &BigUint) -> Result<(Point, Vec<Op>), EcError> {
        self.check_scalar(k)?;
        let mut ops = Vec::with_capacity(k.bits() as usize);
        let point = self.ladder(&self.g, k, |op| ops.push(op));
        Ok((point, ops))
    }

    pub fn mul_g(&self, k: &BigUint) -> Point {
        self.double_and_add(&self.g, k)
    }

    pub(crate) fn check_scalar(&self, k: &BigUint) -> Result<(), EcError> {
        if k.is_zero() || k >= &self.n {
            return Err(EcError::ScalarOutOfRange);
        }
        Ok(())
    }

    /// Byte length of a field element, for fixed-width hex output.
    pub fn field_bytes(&self) -> usize {
        self.p.bits().div_ceil(8) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Affine group law on toy17 in plain integers.
    fn toy_add(p: Option<(i64, i64)>, q: Option<(i64, i64)>) -> Option<(i64, i64)> {
        let m = 17;
        let md = |v: i64| v.rem_euclid(m);
        let inv = |v: i64| (1..m).find(|c| md(v * c) == 1).unwrap();
        let (p, q) = match (p, q) {
            (None, q) => return q,
            (p, None) => return p,
            (Some(p), Some(q)) => (p, q),
        };
        let lambda = if p.0 == q.0 {
            if md(p.1 + q.1) == 0 {
                return None;
            }
            md((3 * p.0 * p.0 + 2) * inv(md(2 * p.1)))
        } else {
            md((q.1 - p.1) * inv(md(q.0 - p.0)))
        };
        let x = md(lambda * lambda - p.0 - q.0);
        Some((x, md(lambda * (p.0 - x) - p.1)))
    }

    fn to_point(p: Option<(i64, i64)>) -> Point {
        match p {
            None => Point::Infinity,
            Some((x, y)) => Point::affine(x as u64, y as u64),
        }
    }

    #[test]
    fn toy_group_table_matches_integer_oracle() {
        let c = CurveParams::toy17();
        let g = Some((5, 1));
        let mut expect = g;
        for k in 1..=40u64 {
            assert_eq!(c.mul_g(&BigUint::from(k)), to_point(expect), "k = {k}");
            expect = toy_add(expect, g);
        }
        assert_eq!(c.point_double(&c.g).unwrap(), Point::affine(6u8, 3u8));
        assert_eq!(c.point_add(&c.g, &c.g).unwrap(), Point::affine(6u8, 3u8));
    }

    #[test]
    fn identity_and_inverse() {
        let c = CurveParams::toy17();
        assert_eq!(c.point_add(&c.g, &Point::Infinity).unwrap(), c.g);
        assert_eq!(c.point_add(&Point::Infinity, &c.g).unwrap(), c.g);
        assert_eq!(c.point_add(&c.g, &c.negate(&c.g)).unwrap(), Point::Infinity);
        assert_eq!(c.point_double(&Point::Infinity).unwrap(), Point::Infinity);
    }

    #[test]
    fn off_curve_inputs_are_rejected() {
        let c = CurveParams::toy17();
        let bad = Point::affine(1u8, 1u8);
        assert!(matches!(c.point_add(&c.g, &bad), Err(EcError::NotOnCurve(_))));
        assert!(matches!(c.point_double(&bad), Err(EcError::NotOnCurve(_))));
    }

    #[test]
    fn leaky_ops_follow_bits_below_the_leading_one() {
        let c = CurveParams::toy17();
        let (p, ops) = c.scalar_mul_leaky(&BigUint::one()).unwrap();
        assert_eq!((p, ops), (c.g.clone(), vec![]));
        let (p, ops) = c.scalar_mul_leaky(&BigUint::from(5u8)).unwrap();
        assert_eq!(ops, [Op::D, Op::DA]);
        assert_eq!(p, c.mul_g(&BigUint::from(5u8)));
        assert!(c.scalar_mul_leaky(&BigUint::zero()).is_err());
        assert!(c.scalar_mul_leaky(&BigUint::from(19u8)).is_err());
    }

    #[test]
    fn bad_curves_are_rejected() {
        let r = CurveParams::new("x", 17u8.into(), 2u8.into(), 2u8.into(), (5u8.into(), 2u8.into()), 19u8.into());
        assert!(r.is_err());
        let r = CurveParams::new("x", 17u8.into(), 2u8.into(), 2u8.into(), (5u8.into(), 1u8.into()), 17u8.into());
        assert!(r.is_err());
    }
}
