//! Built-in model generators: the stochastic logistic map and the
//! polynomialized kinematic bicycle model.

use std::collections::BTreeMap;

use crate::distribution::ScalarDistribution;
use crate::error::Result;
use crate::kron::Mat;
use crate::model::{CoefficientModel, Expr, InitialStateModel, PolynomialSystemSpec};

/// Stochastic logistic map x(t+1) = r(t) x(t) (1 - x(t)):
/// n = 1, degree 2, one parameter r with F_1 = r and F_2 = -r.
///
/// Growth rates outside [0, 4] or initial states outside [0, 1] are
/// warned about, not rejected.
pub fn build_logistic_model(
    r: ScalarDistribution,
    x0: ScalarDistribution,
) -> Result<PolynomialSystemSpec> {
    r.validate()?;
    x0.validate()?;
    let (rlo, rhi) = r.support();
    if rlo < 0.0 || rhi > 4.0 {
        log::warn!("logistic growth rate supported on [{rlo}, {rhi}], outside [0, 4]");
    }
    let (xlo, xhi) = x0.support();
    if xlo < 0.0 || xhi > 1.0 {
        log::warn!("logistic initial state supported on [{xlo}, {xhi}], outside [0, 1]");
    }

    let zero = |cols: usize| Mat::zeros(1, cols).unwrap();
    let constants = vec![zero(1), zero(1), zero(1)];
    let mut lin1 = BTreeMap::new();
    lin1.insert(0, Mat::from_vec(1, 1, vec![1.0]).unwrap());
    let mut lin2 = BTreeMap::new();
    lin2.insert(0, Mat::from_vec(1, 1, vec![-1.0]).unwrap());
    let linear = vec![BTreeMap::new(), lin1, lin2];

    let coeffs = CoefficientModel::new(1, 2, vec![r], constants, linear)?;
    let init = InitialStateModel {
        sources: vec![x0],
        components: vec![Expr::source(0)],
    };
    PolynomialSystemSpec::new("logistic", coeffs, init)
}

/// The logistic map with the growth rate and initial state used in the
/// benchmark experiments: r ~ U[0.3, 0.7], x0 ~ N(0.5, 0.1) truncated to [0, 1].
pub fn logistic_benchmark_model() -> PolynomialSystemSpec {
    build_logistic_model(
        ScalarDistribution::uniform(0.3, 0.7),
        ScalarDistribution::truncated_gaussian(0.5, 0.1, 0.0, 1.0),
    )
    .expect("benchmark model is valid")
}

/// State component indices of the bicycle model.
pub mod bicycle_state {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const PSI: usize = 2;
    pub const V: usize = 3;
    pub const C: usize = 4;
    pub const S: usize = 5;
}

/// Second-order Taylor discretization of the kinematic bicycle model with
/// auxiliary heading variables c = cos(psi + beta), s = sin(psi + beta).
///
/// State x = [X, Y, psi, v, c, s], degree 3, one random parameter: the
/// acceleration a(t). Step size `delta`, slip angle `beta`, rear-axle
/// distance `ell`.
pub fn build_bicycle_model(
    delta: f64,
    beta: f64,
    ell: f64,
    a: ScalarDistribution,
    init: InitialStateModel,
) -> Result<PolynomialSystemSpec> {
    assert!(delta > 0.0, "step size must be positive");
    assert!(ell > 0.0, "axle distance must be positive");
    a.validate()?;

    use bicycle_state::*;
    let n = 6;
    let sb = beta.sin();
    let d2 = delta * delta / 2.0;

    let col2 = |p: usize, q: usize| p * n + q;
    let col3 = |p: usize, q: usize, r: usize| (p * n + q) * n + r;

    // Degree 0: the acceleration enters psi and v additively.
    let c00 = Mat::zeros(n, 1).unwrap();
    let mut c01 = Mat::zeros(n, 1).unwrap();
    c01.set(PSI, 0, d2 * sb / ell);
    c01.set(V, 0, delta);

    // Degree 1: identity drift, heading-speed coupling, and the
    // acceleration-linear cross terms.
    let mut c10 = Mat::identity(n).unwrap();
    c10.set(PSI, V, delta * sb / ell);
    let mut c11 = Mat::zeros(n, n).unwrap();
    c11.set(X, C, d2);
    c11.set(Y, S, d2);
    c11.set(C, S, -d2 * sb / ell);
    c11.set(S, C, d2 * sb / ell);

    // Degree 2: the v-coupled position and heading updates.
    let mut c20 = Mat::zeros(n, n * n).unwrap();
    c20.set(X, col2(C, V), delta);
    c20.set(Y, col2(S, V), delta);
    c20.set(C, col2(S, V), -delta * sb / ell);
    c20.set(S, col2(C, V), delta * sb / ell);

    // Degree 3: second-order v^2 corrections.
    let mut c30 = Mat::zeros(n, n * n * n).unwrap();
    c30.set(X, col3(S, V, V), -d2 * sb / ell);
    c30.set(Y, col3(C, V, V), d2 * sb / ell);
    c30.set(C, col3(C, V, V), -d2 * sb * sb / (ell * ell));
    c30.set(S, col3(S, V, V), -d2 * sb * sb / (ell * ell));

    let constants = vec![c00, c10, c20, c30];
    let mut linear = vec![BTreeMap::new(), BTreeMap::new(), BTreeMap::new(), BTreeMap::new()];
    linear[0].insert(0, c01);
    linear[1].insert(0, c11);

    let coeffs = CoefficientModel::new(n, 3, vec![a], constants, linear)?;
    PolynomialSystemSpec::new("bicycle", coeffs, init)
}

/// The initial state used in the vehicle experiments: X, Y, psi, v are
/// independent N(0, 0.1) and the auxiliary variables are functions of psi:
/// c(0) = cos(psi(0) + beta), s(0) = sin(psi(0) + beta).
pub fn bicycle_benchmark_initial_state(beta: f64) -> InitialStateModel {
    let g = ScalarDistribution::gaussian(0.0, 0.1);
    InitialStateModel {
        sources: vec![g.clone(), g.clone(), g.clone(), g],
        components: vec![
            Expr::source(0),
            Expr::source(1),
            Expr::source(2),
            Expr::source(3),
            Expr::cos_of(2, 1.0, beta),
            Expr::sin_of(2, 1.0, beta),
        ],
    }
}

/// The vehicle model with the benchmark constants: delta = 0.1,
/// beta = pi/8, ell = 2.5, a ~ U[0.9, 1].
pub fn bicycle_benchmark_model() -> PolynomialSystemSpec {
    let beta = std::f64::consts::PI / 8.0;
    build_bicycle_model(
        0.1,
        beta,
        2.5,
        ScalarDistribution::uniform(0.9, 1.0),
        bicycle_benchmark_initial_state(beta),
    )
    .expect("benchmark model is valid")
}
