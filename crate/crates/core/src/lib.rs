//! Moment propagation for discrete-time stochastic polynomial systems.
//!
//! The state update x(t+1) = sum_i F_i(t) x^[i](t) with random, i.i.d.-per-step
//! coefficient matrices is lifted onto Kronecker powers of the state, where it
//! becomes linear. Taking expectations gives a deterministic linear recursion
//! on the moment vectors E[x^[j](t)]; truncating it at a finite Kronecker
//! order N_T gives a finite linear time-invariant system whose iteration
//! approximates all moments up to order N_T.
//!
//! On top of the truncated recursion the crate provides:
//!
//! - exact coefficients for the truncation error of any requested moment,
//!   with global, per-row, and subset-refined upper bounds;
//! - Chebyshev-style tail bounds P(||x(t) - m(t)|| >= alpha) corrected for
//!   the moment-approximation error;
//! - ground-truth oracles (seeded Monte Carlo and exact enumeration over
//!   finite-support randomness) for validation.

pub mod bounds;
pub mod builders;
pub mod carleman;
pub mod distribution;
pub mod error;
pub mod init_moments;
pub mod kron;
pub mod model;
pub mod oracle;
pub mod propagate;
pub mod quad;
pub mod tail;

mod ladder;

pub use builders::{
    bicycle_benchmark_initial_state, bicycle_benchmark_model, build_bicycle_model,
    build_logistic_model, logistic_benchmark_model,
};
pub use distribution::{raw_moment, ScalarDistribution};
pub use error::{Error, Result};
pub use kron::{kron_power, kron_product, stacked_view, BlockLayout, Mat};
pub use model::{load_model, save_model, CoefficientModel, Expr, InitialStateModel, PolynomialSystemSpec};
