//! Synthetic hybrid-modeling datasets: a smooth mechanistic surrogate plus a
//! structured bias that the data-driven model has to learn.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::DataError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    /// `c · x₀²`
    Monotone,
    /// `c · sin(4π x₀)`
    Periodic,
    /// Sum of the two.
    Mixed,
}

impl FromStr for BiasKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "monotone" => Ok(Self::Monotone),
            "periodic" => Ok(Self::Periodic),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown bias kind `{other}` (expected monotone, periodic or mixed)")),
        }
    }
}

impl fmt::Display for BiasKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Monotone => "monotone",
            Self::Periodic => "periodic",
            Self::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub m: usize,
    #[serde(default = "default_features")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    pub bias_kind: BiasKind,
    #[serde(default)]
    pub noise_std: f64,
}

fn default_features() -> usize {
    3
}

/// Floor for the bias scale so a noiseless dataset still carries a bias.
const MIN_BIAS_MEAN: f64 = 0.1;

impl GenConfig {
    pub fn new(m: usize, bias_kind: BiasKind, noise_std: f64, seed: u64) -> Self {
        Self {
            m,
            n: default_features(),
            seed,
            bias_kind,
            noise_std,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.m < 2 {
            return Err(DataError::Invalid(format!("generator needs m >= 2, got {}", self.m)));
        }
        if self.n < 1 {
            return Err(DataError::Invalid("generator needs n >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::Invalid(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// Target mean absolute bias: ten noise standard deviations.
    pub fn bias_mean(&self) -> f64 {
        (10.0 * self.noise_std).max(MIN_BIAS_MEAN)
    }
}

/// Mechanistic surrogate:
/// `g(x) = 2 + Σⱼ (0.5 xⱼ + 0.25 xⱼ²)/(j+1) + 0.2 exp(−x₀)`.
pub fn mechanistic(x: &[f64]) -> f64 {
    let poly: f64 = x
        .iter()
        .enumerate()
        .map(|(j, &v)| (0.5 * v + 0.25 * v * v) / (j as f64 + 1.0))
        .sum();
    2.0 + poly + 0.2 * (-x[0]).exp()
}

/// Structured bias in feature 0. Amplitudes are set so that, for `x₀ ~ U[0,1]`,
/// each component has mean absolute value `bias_mean`
/// (`E[x²] = 1/3`, `E|sin(4πx)| = 2/π`).
pub fn bias(kind: BiasKind, x0: f64, bias_mean: f64) -> f64 {
    let monotone = 3.0 * bias_mean * x0 * x0;
    let periodic = bias_mean * PI / 2.0 * (4.0 * PI * x0).sin();
    match kind {
        BiasKind::Monotone => monotone,
        BiasKind::Periodic => periodic,
        BiasKind::Mixed => monotone + periodic,
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| DataError::Invalid(e.to_string()))?;
    let scale = cfg.bias_mean();

    let mut features = Vec::with_capacity(cfg.m * cfg.n);
    let mut y_true = Vec::with_capacity(cfg.m);
    let mut y_me = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let x: Vec<f64> = (0..cfg.n).map(|_| rng.gen::<f64>()).collect();
        let me = mechanistic(&x);
        let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        y_true.push(me + bias(cfg.bias_kind, x[0], scale) + eps);
        y_me.push(me);
        features.extend(x);
    }
    let names = (0..cfg.n).map(|j| format!("x{j}")).collect();
    Dataset::new(Tensor::matrix(cfg.m, cfg.n, features)?, y_true, y_me, names)
}
