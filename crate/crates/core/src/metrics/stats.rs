use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Count-weighted standard deviation with denominator `sum(w) - 1`.
pub fn weighted_std(s: &[f64], w: &[f64]) -> Result<f64> {
    if s.len() != w.len() {
        return Err(Error::invalid(format!("{} accuracies but {} weights", s.len(), w.len())));
    }
    if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("weights must be positive and finite"));
    }
    let total: f64 = w.iter().sum();
    if !(total > 1.0) {
        return Err(Error::UndefinedVariance(total));
    }
    if s.iter().all(|&v| v == s[0]) {
        // exact zero; the weighted mean below may be off by an ulp
        return Ok(0.0);
    }
    let mean = s.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
    let ss: f64 = s.iter().zip(w).map(|(a, b)| b * (a - mean) * (a - mean)).sum();
    Ok((ss / (total - 1.0)).max(0.0).sqrt())
}

/// Root mean square of per-class weighted standard deviations.
pub fn macro_std(per_class_sigma: &[f64]) -> Result<f64> {
    if per_class_sigma.is_empty() {
        return Err(Error::invalid("macro std of no classes"));
    }
    if per_class_sigma.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("per-class deviations must be non-negative"));
    }
    let ms = per_class_sigma.iter().map(|v| v * v).sum::<f64>() / per_class_sigma.len() as f64;
    Ok(ms.sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    #[default]
    Pearson,
    Spearman,
}

/// Sample correlation of paired values.
pub fn correlation(xs: &[f64], ys: &[f64], kind: CorrelationKind) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid("correlation inputs differ in length"));
    }
    if xs.len() < 3 {
        return Err(Error::invalid("correlation needs at least three pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("correlation inputs must be finite"));
    }
    match kind {
        CorrelationKind::Pearson => pearson(xs, ys),
        CorrelationKind::Spearman => pearson(&ranks(xs), &ranks(ys)),
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based); ties share the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
