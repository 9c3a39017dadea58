use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampler::sample_trunc_gaussian;
use crate::error::{Error, Result};

/// Which latent a transform edits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "z")]
    GlobalZ,
    #[serde(rename = "nu")]
    LocalNu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    TruncGaussian { mu: f64, sigma: f64, bound: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::TruncGaussian { mu, sigma, bound } => {
                if !(sigma > 0.0 && bound > 0.0 && mu.is_finite() && sigma.is_finite()) {
                    return Err(Error::invalid("truncated Gaussian needs sigma > 0 and bound > 0"));
                }
            }
            Perturbation::Uniform { lo, hi } => {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return Err(Error::invalid("uniform perturbation needs lo < hi"));
                }
            }
        }
        Ok(())
    }

    /// `n` i.i.d. draws.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        match *self {
            Perturbation::TruncGaussian { mu, sigma, bound } => sample_trunc_gaussian(mu, sigma, bound, n, rng),
            Perturbation::Uniform { lo, hi } => Ok((0..n).map(|_| rng.random_range(lo..hi)).collect()),
        }
    }
}

/// Additive perturbation of one latent (Gaussian family and its ablations).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub distribution: Perturbation,
    pub target: Target,
    /// Clamp the perturbed code to `[-bound, bound]` (truncated Gaussian only).
    #[serde(default)]
    pub clamp_code: bool,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            distribution: Perturbation::TruncGaussian {
                mu: 0.0,
                sigma: 0.1,
                bound: 4.0,
            },
            target: Target::GlobalZ,
            clamp_code: false,
        }
    }
}

impl PerturbSpec {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self {
            distribution: Perturbation::Uniform { lo, hi },
            ..Self::default()
        }
    }

    pub fn with_target(mut self, target: Target) -> Self {
        self.target = target;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.distribution.validate()?;
        if self.clamp_code && !matches!(self.distribution, Perturbation::TruncGaussian { .. }) {
            return Err(Error::invalid("code clamping needs a truncated Gaussian bound"));
        }
        Ok(())
    }

    pub(crate) fn clamp_bound(&self) -> Option<f64> {
        match (self.clamp_code, self.distribution) {
            (true, Perturbation::TruncGaussian { bound, .. }) => Some(bound),
            _ => None,
        }
    }
}

/// Beta-weighted interpolation of two images' codes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub alpha: f64,
    /// Weights drawn below `tr` are flipped to `1 - m`.
    pub tr: f64,
    pub target: Target,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            tr: 0.5,
            target: Target::GlobalZ,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("mix alpha must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tr) {
            return Err(Error::invalid("mix threshold tr must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The flip rule: a weight below `tr` becomes `1 - m`.
pub fn flip_weight(m: f64, tr: f64) -> f64 {
    if m < tr {
        1.0 - m
    } else {
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum AugMethod {
    Gaussian(PerturbSpec),
    Mix(MixSpec),
}

impl AugMethod {
    pub fn validate(&self) -> Result<()> {
        match self {
            AugMethod::Gaussian(p) => p.validate(),
            AugMethod::Mix(m) => m.validate(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub method: AugMethod,
    /// Transforms per source image when augmenting a whole dataset.
    pub k: usize,
    /// Outputs of a batch job.
    pub count: usize,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.count == 0 {
            return Err(Error::invalid("augmentation needs K >= 1 and L >= 1"));
        }
        self.method.validate()
    }
}
