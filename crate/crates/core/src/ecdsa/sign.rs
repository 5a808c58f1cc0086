//! ECDSA signing with a caller-chosen nonce, verification, and private-key
//! recovery from a disclosed nonce.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::Rng;
use sha2::{Digest, Sha256};

use super::curve::{CurveParams, Point};
use super::EcError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub alpha: BigUint,
    pub public: Point,
}

impl KeyPair {
    pub fn from_private(alpha: BigUint, curve: &CurveParams) -> Result<Self, EcError> {
        curve.check_scalar(&alpha)?;
        let public = curve.mul_g(&alpha);
        Ok(Self { alpha, public })
    }

    pub fn generate<R: Rng + ?Sized>(rng: &mut R, curve: &CurveParams) -> Self {
        let alpha = random_scalar(rng, curve);
        Self::from_private(alpha, curve).expect("scalar drawn from [1, n)")
    }
}

/// Uniform scalar in [1, n).
pub fn random_scalar<R: Rng + ?Sized>(rng: &mut R, curve: &CurveParams) -> BigUint {
    rng.gen_biguint_range(&BigUint::one(), &curve.n)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub m: Vec<u8>,
    /// Message hash reduced mod n.
    pub hash: BigUint,
    pub r: BigUint,
    pub s: BigUint,
}

/// SHA-256 of the message read as a big-endian integer, reduced mod n.
/// The leftmost bits are kept when n is shorter than the digest.
pub fn hash_message(message: &[u8], curve: &CurveParams) -> BigUint {
    let digest = Sha256::digest(message);
    let mut e = BigUint::from_bytes_be(&digest);
    let nbits = curve.n.bits();
    if nbits < 256 {
        e >>= 256 - nbits;
    }
    e % &curve.n
}

fn inv_n(v: &BigUint, curve: &CurveParams) -> BigUint {
    v.modinv(&curve.n).expect("nonzero scalar is invertible mod a prime order")
}

pub fn sign(message: &[u8], keypair: &KeyPair, k: &BigUint, curve: &CurveParams) -> Result<Signature, EcError> {
    sign_prehashed(message, &hash_message(message, curve), keypair, k, curve)
}

/// Signs with an explicit hash value; small curves use this to keep
/// h(m) under the test's control.
pub fn sign_prehashed(
    message: &[u8],
    hash: &BigUint,
    keypair: &KeyPair,
    k: &BigUint,
    curve: &CurveParams,
) -> Result<Signature, EcError> {
    curve.check_scalar(k)?;
    let hash = hash % &curve.n;
    let kg = curve.mul_g(k);
    let r = kg.x().expect("[k]G is finite for 0 < k < n") % &curve.n;
    if r.is_zero() {
        return Err(EcError::RejectedNonce("r = 0"));
    }
    let s = (inv_n(k, curve) * ((&hash + &keypair.alpha * &r) % &curve.n)) % &curve.n;
    if s.is_zero() {
        return Err(EcError::RejectedNonce("s = 0"));
    }
    Ok(Signature {
        m: message.to_vec(),
        hash,
        r,
        s,
    })
}

pub fn verify(sig: &Signature, public: &Point, curve: &CurveParams) -> bool {
    let n = &curve.n;
    if sig.r.is_zero() || &sig.r >= n || sig.s.is_zero() || &sig.s >= n {
        return false;
    }
    if public.is_infinity() || !curve.is_on_curve(public) {
        return false;
    }
    let w = inv_n(&sig.s, curve);
    let u1 = (&sig.hash * &w) % n;
    let u2 = (&sig.r * &w) % n;
    let a = curve.mul_g(&u1);
    let b = curve.double_and_add(public, &u2);
    match curve.point_add(&a, &b) {
        Ok(Point::Affine { x, .. }) => x % n == sig.r,
        _ => false,
    }
}

/// α = r⁻¹(s·k − h) mod n, returned only if [α]G equals `public`.
pub fn recover_private_key(
    sig: &Signature,
    k: &BigUint,
    public: &Point,
    curve: &CurveParams,
) -> Result<BigUint, EcError> {
    let n = &curve.n;
    if sig.r.is_zero() || &sig.r >= n {
        return Err(EcError::ScalarOutOfRange);
    }
    let sk = (&sig.s * (k % n)) % n;
    let h = &sig.hash % n;
    let diff = (sk + n - h) % n;
    let alpha = (inv_n(&sig.r, curve) * diff) % n;
    if !alpha.is_zero() && &curve.mul_g(&alpha) == public {
        Ok(alpha)
    } else {
        Err(EcError::RecoveryFailed { candidate: alpha })
    }
}
