//! Leakage quantification with the Normalized Inner Class Variance
//!
//! ```text
//! NICV(X, Y) = Var[E[Y | X]] / Var[Y]
//! ```
//!
//! where `Y` are the trace samples at one index and `X` the class labels.
//! Its square root, the correlation ratio, bounds `|Pearson(X, Y)|` from
//! above and is the scale on which points of interest are counted.
//!
//! All variances are population variances. Every column is reduced with the
//! same row order, so results do not depend on how columns are scheduled.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::model::Trace;
use crate::num::Real;

#[derive(Debug, Error, PartialEq)]
pub enum LeakageError {
    #[error("class label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("row {row} has {len} samples, expected {width}")]
    RaggedRow { row: usize, len: usize, width: usize },
    #[error("dataset has no rows")]
    Empty,
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("only class {present} is present, NICV needs both classes")]
    SingleClass { present: u8 },
    #[error("class {class} has {rows} row(s), at least 2 are required")]
    TooFewRows { class: u8, rows: usize },
    #[error("classes are unbalanced ({class0} vs {class1} rows); use nicv_general")]
    Unbalanced { class0: usize, class1: usize },
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// Traces (`Y`, one row per repetition) labelled with their class (`X`).
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageDataset<T> {
    labels: Vec<u8>,
    data: Vec<T>,
    width: usize,
}

impl<T: Real> LeakageDataset<T> {
    /// Empty dataset whose rows will hold `width` samples.
    pub fn with_width(width: usize) -> Self {
        Self {
            labels: Vec::new(),
            data: Vec::new(),
            width,
        }
    }

    pub fn new(labels: Vec<u8>, rows: Vec<Vec<T>>) -> Result<Self, LeakageError> {
        if labels.len() != rows.len() {
            return Err(LeakageError::LabelCount {
                labels: labels.len(),
                rows: rows.len(),
            });
        }
        let width = rows.first().map(Vec::len).ok_or(LeakageError::Empty)?;
        let mut ds = Self::with_width(width);
        ds.data.reserve(width * rows.len());
        for (label, row) in labels.into_iter().zip(rows) {
            ds.push_row(label, row)?;
        }
        Ok(ds)
    }

    /// Builds a dataset from class-0 and class-1 traces, truncating every
    /// row to the shortest trace.
    pub fn from_traces(class0: &[Trace], class1: &[Trace]) -> Result<Self, LeakageError> {
        let width = class0
            .iter()
            .chain(class1)
            .map(Trace::len)
            .min()
            .ok_or(LeakageError::Empty)?;
        let mut ds = Self::with_width(width);
        for (label, traces) in [(0u8, class0), (1u8, class1)] {
            for t in traces {
                ds.push_row(label, t.latencies().take(width).map(T::from_count))?;
            }
        }
        Ok(ds)
    }

    pub fn push_row<I>(&mut self, label: u8, row: I) -> Result<(), LeakageError>
    where
        I: IntoIterator<Item = T>,
    {
        if label > 1 {
            return Err(LeakageError::BadLabel(label));
        }
        let before = self.data.len();
        self.data.extend(row);
        let len = self.data.len() - before;
        if len != self.width {
            self.data.truncate(before);
            return Err(LeakageError::RaggedRow {
                row: self.labels.len(),
                len,
                width: self.width,
            });
        }
        self.labels.push(label);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.labels.len() - ones, ones]
    }

    /// Same classes, every sample mapped through `f`.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            labels: self.labels.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            width: self.width,
        }
    }

    fn check_classes(&self) -> Result<[usize; 2], LeakageError> {
        let counts = self.class_counts();
        if self.labels.is_empty() {
            return Err(LeakageError::Empty);
        }
        for (class, &n) in counts.iter().enumerate() {
            if n == 0 {
                return Err(LeakageError::SingleClass {
                    present: 1 - class as u8,
                });
            }
        }
        for (class, &n) in counts.iter().enumerate() {
            if n < 2 {
                return Err(LeakageError::TooFewRows {
                    class: class as u8,
                    rows: n,
                });
            }
        }
        Ok(counts)
    }

    fn column_stats(&self) -> Result<ColumnStats<T>, LeakageError> {
        let counts = self.check_classes()?;
        let w = self.width;
        let mut class_sum = [vec![T::zero(); w], vec![T::zero(); w]];
        for (i, &label) in self.labels.iter().enumerate() {
            for (acc, &v) in class_sum[label as usize].iter_mut().zip(self.row(i)) {
                *acc = *acc + v;
            }
        }
        let n = [T::from_count(counts[0] as u64), T::from_count(counts[1] as u64)];
        let total = n[0] + n[1];
        let class_mean: [Vec<T>; 2] = [0, 1].map(|c| class_sum[c].iter().map(|&s| s / n[c]).collect());
        let mean: Vec<T> = (0..w)
            .map(|j| (class_sum[0][j] + class_sum[1][j]) / total)
            .collect();
        let mut sq = vec![T::zero(); w];
        let mut cross = vec![T::zero(); w];
        let p1 = n[1] / total;
        for (i, &label) in self.labels.iter().enumerate() {
            let x = T::from_count(label as u64) - p1;
            for (j, &v) in self.row(i).iter().enumerate() {
                let d = v - mean[j];
                sq[j] = sq[j] + d * d;
                cross[j] = cross[j] + x * d;
            }
        }
        let var = sq.into_iter().map(|s| s / total).collect();
        let cov = cross.into_iter().map(|s| s / total).collect();
        Ok(ColumnStats {
            n,
            total,
            class_mean,
            mean,
            var,
            cov,
        })
    }
}

struct ColumnStats<T> {
    n: [T; 2],
    total: T,
    class_mean: [Vec<T>; 2],
    mean: Vec<T>,
    var: Vec<T>,
    cov: Vec<T>,
}

impl<T: Real> ColumnStats<T> {
    /// Constant columns: the population variance vanishes up to rounding.
    fn degenerate(&self, j: usize) -> bool {
        let scale = self.mean[j].abs();
        let eps = T::epsilon() * T::from_count(8);
        self.var[j] <= T::zero() || self.var[j].sqrt() <= eps * scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NicvCurve<T> {
    pub values: Vec<T>,
    /// Correlation ratio, the element-wise square root of `values`.
    pub sqrt_values: Vec<T>,
    /// Columns with zero variance; their value is reported as 0.
    pub degenerate: Vec<usize>,
}

impl<T: Real> NicvCurve<T> {
    fn from_values(values: Vec<T>, degenerate: Vec<usize>) -> Self {
        let sqrt_values = values.iter().map(|v| v.sqrt()).collect();
        Self {
            values,
            sqrt_values,
            degenerate,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `Var[E[Y|X]] / Var[Y]` with class means weighted by class frequency.
pub fn nicv_general<T: Real>(dataset: &LeakageDataset<T>) -> Result<NicvCurve<T>, LeakageError> {
    let st = dataset.column_stats()?;
    let mut degenerate = Vec::new();
    let values = (0..dataset.width)
        .map(|j| {
            if st.degenerate(j) {
                degenerate.push(j);
                return T::zero();
            }
            let between = (0..2)
                .map(|c| {
                    let d = st.class_mean[c][j] - st.mean[j];
                    st.n[c] / st.total * d * d
                })
                .fold(T::zero(), |a, b| a + b);
            between / st.var[j]
        })
        .collect();
    Ok(NicvCurve::from_values(values, degenerate))
}

/// `(E[Y|X=0] - E[Y|X=1])^2 / (4 Var[Y])`, valid for balanced classes only.
pub fn nicv_two_class<T: Real>(dataset: &LeakageDataset<T>) -> Result<NicvCurve<T>, LeakageError> {
    let [class0, class1] = dataset.check_classes()?;
    if class0 != class1 {
        return Err(LeakageError::Unbalanced { class0, class1 });
    }
    let st = dataset.column_stats()?;
    let four = T::from_count(4);
    let mut degenerate = Vec::new();
    let values = (0..dataset.width)
        .map(|j| {
            if st.degenerate(j) {
                degenerate.push(j);
                return T::zero();
            }
            let d = st.class_mean[0][j] - st.class_mean[1][j];
            d * d / (four * st.var[j])
        })
        .collect();
    Ok(NicvCurve::from_values(values, degenerate))
}

/// Points of interest: indices whose correlation ratio exceeds `threshold`.
pub fn count_pois<T: Real>(curve: &NicvCurve<T>, threshold: T) -> usize {
    curve.sqrt_values.iter().filter(|&&v| v > threshold).count()
}

/// POI count for each threshold, in order.
pub fn poi_table<T: Real>(curve: &NicvCurve<T>, thresholds: &[T]) -> Vec<(T, usize)> {
    thresholds
        .iter()
        .map(|&t| (t, count_pois(curve, t)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport<T> {
    /// Per column `|Pearson(X, Y)|`; zero on skipped columns.
    pub correlation: Vec<T>,
    pub sqrt_nicv: Vec<T>,
    /// Columns where `|corr| > sqrt(NICV) + slack`.
    pub violations: Vec<usize>,
    /// Largest `|corr| - sqrt(NICV)` over evaluated columns.
    pub max_violation: T,
    /// Zero-variance columns, not evaluated.
    pub skipped: Vec<usize>,
}

pub const BOUND_SLACK: f64 = 1e-9;

/// Checks `|Pearson(X, Y)| <= sqrt(NICV)` on every column, with the 0/1
/// class label as `X`.
pub fn correlation_ratio_bound_check<T: Real>(
    dataset: &LeakageDataset<T>,
) -> Result<BoundReport<T>, LeakageError> {
    let st = dataset.column_stats()?;
    let curve = nicv_general(dataset)?;
    let p1 = st.n[1] / st.total;
    let var_x = p1 * (T::one() - p1);
    let slack = T::lit(BOUND_SLACK);
    let mut report = BoundReport {
        correlation: vec![T::zero(); dataset.width],
        sqrt_nicv: curve.sqrt_values.clone(),
        violations: Vec::new(),
        max_violation: T::neg_infinity(),
        skipped: Vec::new(),
    };
    for j in 0..dataset.width {
        if st.degenerate(j) {
            report.skipped.push(j);
            continue;
        }
        let corr = (st.cov[j] / (var_x * st.var[j]).sqrt()).abs();
        report.correlation[j] = corr;
        let excess = corr - curve.sqrt_values[j];
        if excess > report.max_violation {
            report.max_violation = excess;
        }
        if excess > slack {
            report.violations.push(j);
        }
    }
    Ok(report)
}

/// `index,nicv,sqrt_nicv` with a header row.
pub fn write_nicv_csv<T: Real, W: Write>(curve: &NicvCurve<T>, mut sink: W) -> io::Result<()> {
    writeln!(sink, "index,nicv,sqrt_nicv")?;
    for (i, (v, s)) in curve.values.iter().zip(&curve.sqrt_values).enumerate() {
        writeln!(sink, "{i},{v},{s}")?;
    }
    Ok(())
}

/// Reads the CSV written by [`write_nicv_csv`]. Degenerate flags are not
/// part of the file.
pub fn read_nicv_csv<T: Real, R: BufRead>(source: R) -> Result<NicvCurve<T>, LeakageError> {
    let csv = |line: usize, msg: String| LeakageError::Csv { line, msg };
    let mut values = Vec::new();
    let mut sqrt_values = Vec::new();
    for (n, line) in source.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| csv(line_no, e.to_string()))?;
        if n == 0 {
            if line != "index,nicv,sqrt_nicv" {
                return Err(csv(1, format!("unexpected header `{line}`")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(csv(line_no, "expected 3 fields".into()));
        }
        if fields[0].parse::<usize>().ok() != Some(values.len()) {
            return Err(csv(line_no, format!("bad index `{}`", fields[0])));
        }
        let parse = |s: &str| s.parse::<T>().map_err(|_| csv(line_no, format!("bad number `{s}`")));
        values.push(parse(fields[1])?);
        sqrt_values.push(parse(fields[2])?);
    }
    Ok(NicvCurve {
        values,
        sqrt_values,
        degenerate: Vec::new(),
    })
}
