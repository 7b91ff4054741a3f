//! Chebyshev-style safety bound on P(||x(t) - m(t)|| >= alpha) from
//! approximate first/second moments and their error bounds, plus its
//! inversion into a safety radius for a target exceedance probability.
//!
//! Euclidean norm only; the reported probability is clamped to [0,1] while
//! the raw value is retained for diagnostics.

use crate::error::{Error, Result};

/// Raw and clamped bound plus the variance-surrogate numerator.
#[derive(Debug, Clone, Copy)]
pub struct TailBound {
    pub raw: f64,
    pub clamped: f64,
    pub numerator: f64,
}

/// Variance surrogate sum_i (x2_ii + eps_ii) - max{0, (|x1_i| - eps_i)}^2.
fn numerator(x1: &[f64], x2_diag: &[f64], eps_i: &[f64], eps_ii: &[f64]) -> f64 {
    assert_eq!(x1.len(), x2_diag.len());
    assert_eq!(x1.len(), eps_i.len());
    assert_eq!(x1.len(), eps_ii.len());
    let mut acc = 0.0;
    for i in 0..x1.len() {
        let lowered = (x1[i].abs() - eps_i[i]).max(0.0);
        acc += x2_diag[i] + eps_ii[i] - lowered * lowered;
    }
    acc
}

/// Upper bound on P(||x(t) - x1|| >= alpha) for alpha > eps.
///
/// `x1` and `x2_diag` are the approximate first moment and the diagonal of
/// the approximate second moment; `eps` bounds ||x1 - E[x(t)]||, `eps_i`
/// and `eps_ii` bound the per-entry first/second moment errors. All error
/// inputs zero reduces to the plain Chebyshev bound.
pub fn safety_bound(
    x1: &[f64],
    x2_diag: &[f64],
    eps: f64,
    eps_i: &[f64],
    eps_ii: &[f64],
    alpha: f64,
) -> Result<TailBound> {
    if !(alpha > eps) {
        return Err(Error::validation(format!(
            "tail bound needs alpha > eps, got alpha = {alpha}, eps = {eps}"
        )));
    }
    if eps < 0.0 || eps_i.iter().chain(eps_ii).any(|&e| e < 0.0) {
        return Err(Error::validation("error bounds must be non-negative"));
    }
    let num = numerator(x1, x2_diag, eps_i, eps_ii);
    let raw = num / ((alpha - eps) * (alpha - eps));
    Ok(TailBound {
        raw,
        clamped: raw.clamp(0.0, 1.0),
        numerator: num,
    })
}

/// Smallest alpha with safety_bound <= p_max:
/// alpha = eps + sqrt(max(numerator, 0) / p_max).
pub fn safety_radius(
    x1: &[f64],
    x2_diag: &[f64],
    eps: f64,
    eps_i: &[f64],
    eps_ii: &[f64],
    p_max: f64,
) -> Result<f64> {
    if !(p_max > 0.0 && p_max <= 1.0) {
        return Err(Error::validation(format!(
            "target probability must be in (0, 1], got {p_max}"
        )));
    }
    if eps < 0.0 || eps_i.iter().chain(eps_ii).any(|&e| e < 0.0) {
        return Err(Error::validation("error bounds must be non-negative"));
    }
    let num = numerator(x1, x2_diag, eps_i, eps_ii).max(0.0);
    Ok(eps + (num / p_max).sqrt())
}
