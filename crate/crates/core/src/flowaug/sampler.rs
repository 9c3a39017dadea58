use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability that `N(mu, sigma^2)` lands in `[-b, b]`.
pub fn acceptance_probability(mu: f64, sigma: f64, b: f64) -> f64 {
    let hi = (b - mu) / sigma;
    let lo = (-b - mu) / sigma;
    // Upper-tail differences keep precision when both limits sit far in the right tail.
    if lo > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// `n` draws of `N(mu, sigma^2)` conditioned on `[-b, b]`, by rejection.
pub fn sample_trunc_gaussian<R: Rng + ?Sized>(mu: f64, sigma: f64, b: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !(b > 0.0) || !mu.is_finite() {
        return Err(Error::invalid(format!("bound must be positive and mu finite (b = {b}, mu = {mu})")));
    }
    let p = acceptance_probability(mu, sigma, b);
    if !(p >= 1e-6) {
        return Err(Error::LowAcceptance(p));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let e: f64 = rng.sample(StandardNormal);
        let x = mu + sigma * e;
        if (-b..=b).contains(&x) {
            out.push(x);
        }
    }
    Ok(out)
}
