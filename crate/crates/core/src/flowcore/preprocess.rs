//! Uniform dequantisation of 8-bit intensities followed by a logit squeeze.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    /// Number of intensity levels (256 for 8-bit data).
    pub levels: u32,
    /// Logit squeeze margin: `p = eps + (1 - 2 eps) u`.
    pub logit_eps: f64,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            levels: 256,
            logit_eps: 0.05,
        }
    }
}

impl Preprocess {
    fn max_level(&self) -> f64 {
        f64::from(self.levels - 1)
    }

    /// Unit-interval intensity to dequantised `u` in `[0, 1)`, given the
    /// within-bin offset `noise` in `[0, 1)`. `noise = 0.5` is the bin centre.
    pub fn dequantize(&self, v: f64, noise: f64, snap: bool) -> f64 {
        let q = v.clamp(0.0, 1.0) * self.max_level();
        let q = if snap { q.round() } else { q };
        (q + noise) / f64::from(self.levels)
    }

    pub fn quantize_back(&self, u: f64) -> f64 {
        (u * f64::from(self.levels) - 0.5) / self.max_level()
    }

    /// `u -> logit(eps + (1 - 2 eps) u)` with its log-Jacobian.
    pub fn squeeze(&self, u: f64) -> (f64, f64) {
        let e = self.logit_eps;
        let p = e + (1.0 - 2.0 * e) * u;
        let y = p.ln() - (1.0 - p).ln();
        let logdet = (1.0 - 2.0 * e).ln() - p.ln() - (1.0 - p).ln();
        (y, logdet)
    }

    pub fn unsqueeze(&self, y: f64) -> f64 {
        let e = self.logit_eps;
        let p = 1.0 / (1.0 + (-y).exp());
        (p - e) / (1.0 - 2.0 * e)
    }

    /// Deterministic forward map used when encoding: bin-centre dequantisation
    /// without snapping, so that `inverse(forward(v)) == v` for any `v`.
    pub fn forward(&self, v: f64) -> f64 {
        self.squeeze(self.dequantize(v, 0.5, false)).0
    }

    /// Inverse of [`Preprocess::forward`], clamped to `[0, 1]`.
    pub fn inverse(&self, y: f64) -> f64 {
        self.quantize_back(self.unsqueeze(y)).clamp(0.0, 1.0)
    }
}
