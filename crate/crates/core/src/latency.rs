//! Sampling per-class latencies from the summary statistics of a [`LatencyModel`].
//!
//! Each class is fitted with a shifted log-normal `shift + exp(mu + sigma * Z)`
//! whose mean, median and standard deviation match the model exactly; draws
//! below the class floor are rejected. Classes with `mean == median` (or a
//! skew the log-normal family cannot express) fall back to a normal
//! distribution truncated at the floor, and `std == 0` emits the median.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{ClassStats, LatencyClass, LatencyModel};

/// Shape used to turn (mean, std, median, floor) into a sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatencyShape {
    /// Matches mean, median and std.
    #[default]
    ShiftedLogNormal,
    /// Matches mean and std only; the median sits near the mean.
    TruncatedNormal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassDistribution {
    Constant(f64),
    TruncatedNormal {
        mean: f64,
        std: f64,
        floor: f64,
    },
    ShiftedLogNormal {
        shift: f64,
        mu: f64,
        sigma: f64,
        floor: f64,
    },
}

const MAX_REJECTIONS: usize = 64;

/// Ratio (mean - median) / std of a log-normal with shape `sigma`.
fn skew_ratio(sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    (1.0 - (-s2 / 2.0).exp()) / (s2.exp() - 1.0).sqrt()
}

/// The ratio peaks just above sigma = 1; solutions are taken on the
/// monotone branch below it.
const SIGMA_BRANCH_MAX: f64 = 1.0;

impl ClassDistribution {
    pub fn fit(stats: &ClassStats, shape: LatencyShape) -> Self {
        if stats.std == 0.0 {
            return ClassDistribution::Constant(stats.median);
        }
        let normal = ClassDistribution::TruncatedNormal {
            mean: stats.mean,
            std: stats.std,
            floor: stats.floor,
        };
        if shape == LatencyShape::TruncatedNormal {
            return normal;
        }
        let target = (stats.mean - stats.median) / stats.std;
        if target <= 1e-9 || target >= skew_ratio(SIGMA_BRANCH_MAX) {
            return normal;
        }
        let (mut lo, mut hi) = (0.0_f64, SIGMA_BRANCH_MAX);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if skew_ratio(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sigma = 0.5 * (lo + hi);
        let scale = (stats.mean - stats.median) / ((sigma * sigma / 2.0).exp() - 1.0);
        ClassDistribution::ShiftedLogNormal {
            shift: stats.median - scale,
            mu: scale.ln(),
            sigma,
            floor: stats.floor,
        }
    }

    fn draw_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ClassDistribution::Constant(v) => v,
            ClassDistribution::TruncatedNormal { mean, std, .. } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
            ClassDistribution::ShiftedLogNormal {
                shift, mu, sigma, ..
            } => {
                let z: f64 = StandardNormal.sample(rng);
                shift + (mu + sigma * z).exp()
            }
        }
    }

    fn floor(&self) -> f64 {
        match *self {
            ClassDistribution::Constant(_) => 0.0,
            ClassDistribution::TruncatedNormal { floor, .. }
            | ClassDistribution::ShiftedLogNormal { floor, .. } => floor,
        }
    }

    /// Draws one latency in whole cycles, never below the floor.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let floor = self.floor();
        let mut value = self.draw_raw(rng);
        let mut tries = 1;
        while value < floor && tries < MAX_REJECTIONS {
            value = self.draw_raw(rng);
            tries += 1;
        }
        value.max(floor).round() as u64
    }
}

/// Samplers for all four classes of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySampler {
    classes: [ClassDistribution; 4],
}

impl LatencySampler {
    pub fn new(model: &LatencyModel) -> Self {
        Self::with_shape(model, LatencyShape::default())
    }

    pub fn with_shape(model: &LatencyModel, shape: LatencyShape) -> Self {
        let fit = |c| ClassDistribution::fit(model.class(c), shape);
        Self {
            classes: LatencyClass::ALL.map(fit),
        }
    }

    pub fn distribution(&self, class: LatencyClass) -> &ClassDistribution {
        &self.classes[class as usize]
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: LatencyClass, rng: &mut R) -> u64 {
        self.distribution(class).sample(rng)
    }
}
