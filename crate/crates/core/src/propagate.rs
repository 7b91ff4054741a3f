//! The truncated moment system: y~(t+1) = E(N_T,N_T) y~(t).
//!
//! Two interchangeable engines apply the transfer map. The dense engine
//! materializes E(N_T,N_T) once (offline, cacheable to disk) and does a
//! matrix-vector product per step; it is the default whenever S(n,N_T)^2
//! fits the element-count limit. The matrix-free engine applies the same
//! map directly from the coefficient matrices and makes large-state /
//! large-N_T configurations (vehicle model at N_T = 8) feasible. Both
//! engines are cross-checked against each other in the property suite.

use std::path::Path;

use crate::carleman::{build_e_cached, ExpectedBlockMatrix};
use crate::error::{Error, Result};
use crate::init_moments::InitialMomentEngine;
use crate::kron::{check_size, BlockLayout};
use crate::ladder::LadderEngine;
use crate::model::PolynomialSystemSpec;

/// The stacked approximate moment vector at one time step.
///
/// The constant slot y[0] is re-pinned to exactly 1 after every step: the
/// top row of the transfer matrix is [1, 0, ..., 0] in exact arithmetic, so
/// pinning only removes floating-point drift.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub t: usize,
    pub y: Vec<f64>,
    layout: BlockLayout,
}

impl MomentState {
    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    /// Block j of the stacked vector, the approximation of E[x^[j](t)].
    pub fn moment(&self, j: usize) -> Result<&[f64]> {
        crate::kron::stacked_view(&self.y, &self.layout, j)
    }
}

/// Block j of a state; errors on j > N_T.
pub fn extract_moment(state: &MomentState, j: usize) -> Result<&[f64]> {
    state.moment(j)
}

enum Engine {
    Dense(Box<ExpectedBlockMatrix>),
    MatrixFree(LadderEngine),
}

/// The offline-computed engine iterating the truncated system.
pub struct TruncatedPropagator {
    n: usize,
    n_t: usize,
    layout: BlockLayout,
    model_hash: String,
    engine: Engine,
}

impl TruncatedPropagator {
    /// Builds the dense transfer matrix, using `cache_dir` when given.
    pub fn build_dense(
        spec: &PolynomialSystemSpec,
        n_t: usize,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        let layout = BlockLayout::new(spec.coeffs.n(), n_t)?;
        check_size(layout.total_len(), layout.total_len(), "dense propagator")?;
        let hash = spec.content_hash();
        let e = build_e_cached(&spec.coeffs, n_t, n_t, &hash, cache_dir)?;
        Ok(TruncatedPropagator {
            n: spec.coeffs.n(),
            n_t,
            layout,
            model_hash: hash,
            engine: Engine::Dense(Box::new(e)),
        })
    }

    /// Builds the matrix-free engine; no offline matrix, no cache.
    pub fn build_matrix_free(spec: &PolynomialSystemSpec, n_t: usize) -> Result<Self> {
        let layout = BlockLayout::new(spec.coeffs.n(), n_t)?;
        Ok(TruncatedPropagator {
            n: spec.coeffs.n(),
            n_t,
            layout,
            model_hash: spec.content_hash(),
            engine: Engine::MatrixFree(LadderEngine::new(&spec.coeffs, n_t)?),
        })
    }

    /// Dense when S(n,N_T)^2 fits the element-count limit, matrix-free
    /// otherwise.
    pub fn build(
        spec: &PolynomialSystemSpec,
        n_t: usize,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        let layout = BlockLayout::new(spec.coeffs.n(), n_t)?;
        let total = layout.total_len() as u128;
        if total * total <= crate::kron::size_limit() as u128 {
            Self::build_dense(spec, n_t, cache_dir)
        } else {
            log::info!(
                "S(n,N_T)^2 = {} exceeds the element limit; using the matrix-free engine",
                total * total
            );
            Self::build_matrix_free(spec, n_t)
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn truncation_limit(&self) -> usize {
        self.n_t
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.engine, Engine::Dense(_))
    }

    /// The materialized transfer matrix, when the dense engine is active.
    pub fn matrix(&self) -> Option<&ExpectedBlockMatrix> {
        match &self.engine {
            Engine::Dense(e) => Some(e),
            Engine::MatrixFree(_) => None,
        }
    }

    /// One application of the transfer map, with the constant slot re-pinned.
    pub fn step(&self, state: &MomentState) -> Result<MomentState> {
        assert_eq!(state.y.len(), self.layout.total_len(), "state size mismatch");
        let mut y = match &self.engine {
            Engine::Dense(e) => e.mat.matvec(&state.y),
            Engine::MatrixFree(l) => l.apply(&state.y, &self.layout)?,
        };
        y[0] = 1.0;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: state.t + 1 });
        }
        Ok(MomentState {
            t: state.t + 1,
            y,
            layout: self.layout.clone(),
        })
    }

    /// States 0..=t. Divergence aborts with an error naming the failing step.
    pub fn propagate(&self, s0: MomentState, t: usize) -> Result<Vec<MomentState>> {
        let (states, diverged) = self.propagate_partial(s0, t)?;
        match diverged {
            Some(step) => Err(Error::Divergence { step }),
            None => Ok(states),
        }
    }

    /// Like `propagate`, but keeps the finite prefix on divergence and
    /// reports the failing step alongside it.
    pub fn propagate_partial(
        &self,
        s0: MomentState,
        t: usize,
    ) -> Result<(Vec<MomentState>, Option<usize>)> {
        let mut states = Vec::with_capacity(t + 1);
        states.push(s0);
        for _ in 0..t {
            match self.step(states.last().unwrap()) {
                Ok(next) => states.push(next),
                Err(Error::Divergence { step }) => return Ok((states, Some(step))),
                Err(other) => return Err(other),
            }
        }
        Ok((states, None))
    }
}

/// y~(0): blocks j = 0..=N_T filled with E[x0^[j]].
pub fn init_state(engine: &InitialMomentEngine, n_t: usize) -> Result<MomentState> {
    let layout = BlockLayout::new(engine.n(), n_t)?;
    let mut y = vec![0.0; layout.total_len()];
    for j in 0..=n_t {
        let block = engine.kron_moment(j)?;
        y[layout.offset(j)..layout.offset(j) + block.len()].copy_from_slice(&block);
    }
    Ok(MomentState { t: 0, y, layout })
}
