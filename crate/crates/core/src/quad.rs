//! Gauss-type quadrature rules used for distribution moments and
//! initial-state expectations.
//!
//! Gauss-Legendre handles bounded supports, Gauss-Hermite handles Gaussian
//! sources. Node/weight pairs are generated by Newton iteration on the
//! orthogonal-polynomial recurrences and memoized per order.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{LazyLock, Mutex};

use crate::error::{Error, Result};

/// Maximum node count tried before reporting non-convergence.
pub const MAX_NODES: usize = 4096;

static GL_CACHE: LazyLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));
static GH_CACHE: LazyLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if let Some(hit) = GL_CACHE.lock().unwrap().get(&n) {
        return hit.clone();
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-like initial guess for the i-th root of P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            // Evaluate P_n and P_{n-1} by the three-term recurrence.
            let mut p0 = 1.0f64;
            let mut p1 = x;
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let mut p0 = 1.0f64;
        let mut p1 = x;
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    GL_CACHE
        .lock()
        .unwrap()
        .insert(n, (nodes.clone(), weights.clone()));
    (nodes, weights)
}

/// Gauss-Hermite nodes and weights for the weight function exp(-x^2).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if let Some(hit) = GH_CACHE.lock().unwrap().get(&n) {
        return hit.clone();
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    let mut x = 0.0f64;
    for i in 0..m {
        // Standard initial guesses for the roots, largest first.
        x = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => x - 1.14 * nf.powf(0.426) / x,
            2 => 1.86 * x - 0.86 * nodes[0],
            3 => 1.91 * x - 0.91 * nodes[1],
            _ => 2.0 * x - nodes[i - 2],
        };
        let mut dp = 0.0;
        for _ in 0..200 {
            // Orthonormal Hermite recurrence keeps values in range.
            let piv = PI.powf(-0.25);
            let mut p0 = piv;
            let mut p1 = piv * (2.0f64).sqrt() * x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = x * (2.0 / kf).sqrt() * p1 - ((kf - 1.0) / kf).sqrt() * p0;
                p0 = p1;
                p1 = p2;
            }
            dp = (2.0 * nf).sqrt() * p0;
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        let w = 2.0 / (dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    // Store in ascending order for readability.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nodes[a].partial_cmp(&nodes[b]).unwrap());
    let nodes: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
    let weights: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
    GH_CACHE
        .lock()
        .unwrap()
        .insert(n, (nodes.clone(), weights.clone()));
    (nodes, weights)
}

/// Integral of f on [lo, hi] with an n-node Gauss-Legendre rule.
pub fn integrate_legendre(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let c = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        acc += w * f(mid + c * x);
    }
    acc * c
}

/// E[f(Z)] for Z ~ N(mean, stddev) with an n-node Gauss-Hermite rule.
pub fn gaussian_expectation(f: impl Fn(f64) -> f64, mean: f64, stddev: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let scale = stddev * std::f64::consts::SQRT_2;
    let inv_sqrt_pi = 1.0 / PI.sqrt();
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        acc += w * f(mean + scale * x);
    }
    acc * inv_sqrt_pi
}

/// Runs `eval` with the node count doubled until two successive estimates
/// agree within `tol` (absolute), starting from `start_nodes`.
pub fn converge_doubling(
    eval: impl Fn(usize) -> f64,
    start_nodes: usize,
    tol: f64,
    context: &str,
) -> Result<f64> {
    let mut n = start_nodes.max(4);
    let mut prev = eval(n);
    let mut achieved = f64::INFINITY;
    while n <= MAX_NODES / 2 {
        n *= 2;
        let cur = eval(n);
        achieved = (cur - prev).abs();
        if achieved <= tol {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::Quadrature {
        context: context.to_string(),
        achieved,
        wanted: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_weights_sum_to_two() {
        for n in [1, 2, 5, 16, 33, 200] {
            let (_, w) = gauss_legendre(n);
            let s: f64 = w.iter().sum();
            assert!((s - 2.0).abs() < 1e-12, "n={n} sum={s}");
        }
    }

    #[test]
    fn legendre_exact_on_polynomials() {
        // n nodes integrate degree 2n-1 exactly: x^6 on [0,1] with n=4.
        let v = integrate_legendre(|x| x.powi(6), 0.0, 1.0, 4);
        assert!((v - 1.0 / 7.0).abs() < 1e-14);
        let v = integrate_legendre(|x| x.powi(9) - 2.0 * x, -1.0, 3.0, 5);
        let exact = (3.0f64.powi(10) - 1.0) / 10.0 - (9.0 - 1.0);
        assert!((v - exact).abs() < 1e-9 * exact.abs());
    }

    #[test]
    fn hermite_weights_sum_to_sqrt_pi() {
        for n in [1, 2, 3, 8, 31, 64, 150] {
            let (_, w) = gauss_hermite(n);
            let s: f64 = w.iter().sum();
            assert!(
                (s - PI.sqrt()).abs() < 1e-10,
                "n={n} sum={s} vs {}",
                PI.sqrt()
            );
        }
    }

    #[test]
    fn hermite_gaussian_moments() {
        // E[Z^2] = sigma^2, E[Z^4] = 3 sigma^4 for Z ~ N(0, sigma).
        let sigma = 0.37;
        let m2 = gaussian_expectation(|x| x * x, 0.0, sigma, 8);
        assert!((m2 - sigma * sigma).abs() < 1e-14);
        let m4 = gaussian_expectation(|x| x.powi(4), 0.0, sigma, 8);
        assert!((m4 - 3.0 * sigma.powi(4)).abs() < 1e-14);
        let m1 = gaussian_expectation(|x| x, 1.5, sigma, 6);
        assert!((m1 - 1.5).abs() < 1e-14);
    }

    #[test]
    fn hermite_trig_expectation() {
        // E[cos(Z + pi/8)] = exp(-sigma^2/2) cos(pi/8) for Z ~ N(0, sigma).
        let v = gaussian_expectation(|x| (x + PI / 8.0).cos(), 0.0, 0.1, 24);
        assert!((v - 0.91927166411943177628).abs() < 1e-13);
        let s = gaussian_expectation(|x| (x + PI / 8.0).sin(), 0.0, 0.1, 24);
        assert!((s - 0.38077479078355313585).abs() < 1e-13);
    }

    #[test]
    fn doubling_converges_and_reports() {
        let v = converge_doubling(
            |n| integrate_legendre(|x| x.exp(), 0.0, 1.0, n),
            4,
            1e-12,
            "exp",
        )
        .unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-12);

        // A pathological oscillator that never settles under doubling.
        let err = converge_doubling(
            |n| (n.trailing_zeros() % 2) as f64,
            4,
            1e-12,
            "osc",
        );
        assert!(matches!(err, Err(Error::Quadrature { .. })));
    }
}
