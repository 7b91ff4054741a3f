//! Exact truncation-error coefficients and the bound family built on them.
//!
//! The truncation error of the order-j0 moment at horizon t is a linear
//! functional of the initial Kronecker moments:
//!
//!   e_{j0}(t) = sum_{j=0}^{j0 d_S^t} Etil_j E[x0^[j]].
//!
//! The coefficients Etil_j are computed as one difference of block-row
//! products: row block j0 of the full chain
//! E(j0, j0 d_S) E(j0 d_S, j0 d_S^2) ... E(j0 d_S^{t-1}, j0 d_S^t) minus row
//! block j0 of E(N_T,N_T)^t zero-padded on the columns above N_T. That
//! difference sums exactly the truncation-overflow terms, and it vanishes
//! identically when j0 d_S^t <= N_T, in which case the coefficients are
//! returned as structural zeros without any computation.
//!
//! Bounds: a global product bound xi * sum_j ||Etil_j||, per-row
//! Cauchy-Schwarz bounds, and the subset refinement that evaluates the
//! indices in J exactly and only distributes the norm over the rest.

use crate::carleman::build_e;
use crate::error::{Error, Result};
use crate::init_moments::InitialMomentEngine;
use crate::kron::{euclidean_norm, Mat};
use crate::model::CoefficientModel;

/// True iff the truncated system reproduces the order-j0 moment at time t
/// exactly: j0 * d_S^t <= N_T.
pub fn exactness_condition(j0: usize, t: usize, d_s: usize, n_t: usize) -> bool {
    let mut required: u128 = j0 as u128;
    for _ in 0..t {
        required = required.saturating_mul(d_s as u128);
    }
    required <= n_t as u128
}

/// Which matrix norm a bound used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Spectral,
    Frobenius,
    Mixed,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormKind::Spectral => write!(f, "spectral"),
            NormKind::Frobenius => write!(f, "frobenius"),
            NormKind::Mixed => write!(f, "mixed"),
        }
    }
}

/// Spectral norm on small blocks, Frobenius (a valid upper bound of the
/// spectral norm) above 10^4 entries.
fn block_norm(m: &Mat) -> (f64, NormKind) {
    if m.rows() * m.cols() <= 10_000 {
        (m.spectral_norm(), NormKind::Spectral)
    } else {
        (m.frobenius_norm(), NormKind::Frobenius)
    }
}

/// The matrices Etil_j expressing e_{j0}(t) over the initial moments.
#[derive(Debug, Clone)]
pub struct ErrorCoefficients {
    pub j0: usize,
    pub t: usize,
    pub n_t: usize,
    pub d_s: usize,
    pub n: usize,
    /// Etil_j for j = 0..=j0 d_S^t, each n^{j0} x n^j.
    pub coeffs: Vec<Mat>,
    /// Set when the exactness condition held and all coefficients are
    /// structural zeros.
    pub exact: bool,
}

impl ErrorCoefficients {
    /// Highest initial-moment order entering the error, j0 * d_S^t.
    pub fn max_order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Row i of Etil_j (the row functional v_{j,i}).
    pub fn row(&self, j: usize, i: usize) -> &[f64] {
        self.coeffs[j].row(i)
    }

    /// e_{j0}(t) = sum_j Etil_j E[x0^[j]], evaluated exactly.
    pub fn error_vector(&self, moments: &InitialMomentEngine) -> Result<Vec<f64>> {
        let rows = self.n.pow(self.j0 as u32);
        let mut out = vec![0.0; rows];
        for (j, m) in self.coeffs.iter().enumerate() {
            if m.is_zero() {
                continue;
            }
            let mu = moments.kron_moment(j)?;
            for (o, item) in out.iter_mut().enumerate() {
                *item += m
                    .row(o)
                    .iter()
                    .zip(&mu)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        Ok(out)
    }
}

fn chain_orders(j0: usize, t: usize, d_s: usize) -> Result<Vec<usize>> {
    let mut orders = vec![j0];
    let mut cur = j0 as u128;
    for _ in 0..t {
        cur = cur.saturating_mul(d_s as u128);
        if cur > u32::MAX as u128 {
            return Err(Error::SizeLimit {
                required: cur,
                allowed: u32::MAX as u128,
                context: "error-coefficient chain order j0 d_S^t".into(),
            });
        }
        orders.push(cur as usize);
    }
    Ok(orders)
}

/// Builds the error coefficients for (j0, t, N_T).
pub fn build_error_coefficients(
    model: &CoefficientModel,
    j0: usize,
    t: usize,
    n_t: usize,
) -> Result<ErrorCoefficients> {
    if j0 > n_t {
        return Err(Error::validation(format!(
            "j0 = {j0} exceeds the truncation limit {n_t}"
        )));
    }
    let n = model.n();
    let d_s = model.degree();
    let orders = chain_orders(j0, t, d_s)?;
    let max_order = *orders.last().unwrap();

    if exactness_condition(j0, t, d_s, n_t) {
        let rows = n.pow(j0 as u32);
        let coeffs = (0..=max_order)
            .map(|j| Mat::zeros(rows, n.pow(j as u32)))
            .collect::<Result<Vec<_>>>()?;
        return Ok(ErrorCoefficients {
            j0,
            t,
            n_t,
            d_s,
            n,
            coeffs,
            exact: true,
        });
    }

    // Row block j0 of the untruncated t-step chain.
    let first = build_e(model, orders[0], orders[1])?;
    let mut full = first.row_block(j0);
    let mut full_cols = first.col_layout.clone();
    for s in 1..t {
        let stage = build_e(model, orders[s], orders[s + 1])?;
        full = full.matmul(&stage.mat)?;
        full_cols = stage.col_layout.clone();
    }

    // Row block j0 of E(N_T,N_T)^t.
    let et = build_e(model, n_t, n_t)?;
    let mut trunc = et.row_block(j0);
    for _ in 1..t {
        trunc = trunc.matmul(&et.mat)?;
    }
    let trunc_cols = et.col_layout.clone();

    let rows = n.pow(j0 as u32);
    let mut coeffs = Vec::with_capacity(max_order + 1);
    for j in 0..=max_order {
        let mut block = full.block(0, full_cols.offset(j), rows, full_cols.block_len(j));
        if j <= n_t {
            let tb = trunc.block(0, trunc_cols.offset(j), rows, trunc_cols.block_len(j));
            block.axpy(-1.0, &tb);
        }
        coeffs.push(block);
    }
    Ok(ErrorCoefficients {
        j0,
        t,
        n_t,
        d_s,
        n,
        coeffs,
        exact: false,
    })
}

/// Global bound xi * sum_j ||Etil_j|| with xi = max over the norm table.
pub fn global_bound(ec: &ErrorCoefficients, norms: &[f64]) -> (f64, NormKind) {
    assert!(
        norms.len() > ec.max_order(),
        "norm table must cover orders 0..=j0 d_S^t"
    );
    let xi = norms[..=ec.max_order()]
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    let mut total = 0.0;
    let mut kind: Option<NormKind> = None;
    for m in &ec.coeffs {
        if m.is_zero() {
            continue;
        }
        let (v, k) = block_norm(m);
        total += v;
        kind = Some(match kind {
            None => k,
            Some(prev) if prev == k => k,
            Some(_) => NormKind::Mixed,
        });
    }
    (xi * total, kind.unwrap_or(NormKind::Spectral))
}

/// Subset-refined row bound:
/// |sum_{j in J} v_{j,i} E[x0^[j]]| + xi_J sum_{j not in J} ||v_{j,i}||,
/// with xi_J the largest initial-moment norm outside J. J empty gives the
/// plain Cauchy-Schwarz row bound; J full evaluates |e_i| exactly.
pub fn refined_row_bound(
    ec: &ErrorCoefficients,
    moments: &InitialMomentEngine,
    i: usize,
    j_set: &[usize],
) -> Result<f64> {
    let max_order = ec.max_order();
    let mut in_j = vec![false; max_order + 1];
    for &j in j_set {
        assert!(j <= max_order, "J index {j} above j0 d_S^t = {max_order}");
        in_j[j] = true;
    }
    let norms = moments.moment_norm_table(max_order)?;

    let mut exact_part = 0.0;
    for (j, &inside) in in_j.iter().enumerate() {
        if !inside {
            continue;
        }
        let v = ec.row(j, i);
        let mu = moments.kron_moment(j)?;
        exact_part += v.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>();
    }

    let mut xi_j = 0.0f64;
    let mut tail = 0.0;
    for (j, &inside) in in_j.iter().enumerate() {
        if inside {
            continue;
        }
        xi_j = xi_j.max(norms[j]);
        tail += euclidean_norm(ec.row(j, i));
    }
    Ok(exact_part.abs() + xi_j * tail)
}

/// xi_J for a given subset, from a norm table.
pub fn xi_for_subset(norms: &[f64], max_order: usize, j_set: &[usize]) -> f64 {
    let mut in_j = vec![false; max_order + 1];
    for &j in j_set {
        in_j[j] = true;
    }
    (0..=max_order)
        .filter(|&j| !in_j[j])
        .map(|j| norms[j])
        .fold(0.0f64, f64::max)
}

/// How to pick the refinement subset J.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JStrategy {
    /// k indices with the largest row norms ||v_{j,i}||.
    ByRowNorm,
    /// k indices with the largest initial-moment norms ||E[x0^[j]]||.
    ByMomentNorm,
}

impl std::fmt::Display for JStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JStrategy::ByRowNorm => write!(f, "row-norm"),
            JStrategy::ByMomentNorm => write!(f, "moment-norm"),
        }
    }
}

/// Deterministic subset choice: k indices with the largest score, ties
/// broken toward the smaller index.
pub fn choose_j(
    ec: &ErrorCoefficients,
    norms: &[f64],
    i: usize,
    k: usize,
    strategy: JStrategy,
) -> Vec<usize> {
    let max_order = ec.max_order();
    assert!(k <= max_order + 1, "|J| cannot exceed j0 d_S^t + 1");
    let score = |j: usize| -> f64 {
        match strategy {
            JStrategy::ByRowNorm => euclidean_norm(ec.row(j, i)),
            JStrategy::ByMomentNorm => norms[j],
        }
    };
    let mut idx: Vec<usize> = (0..=max_order).collect();
    idx.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out: Vec<usize> = idx.into_iter().take(k).collect();
    out.sort_unstable();
    out
}

/// One row of a bound report.
#[derive(Debug, Clone)]
pub struct RowBound {
    pub row: usize,
    pub j_set: Vec<usize>,
    pub bound: f64,
    pub xi_j: f64,
}

/// Evaluated bounds for one (j0, t, N_T, |J|, strategy) configuration.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub j0: usize,
    pub t: usize,
    pub n_t: usize,
    pub j_size: usize,
    pub strategy: JStrategy,
    pub xi: f64,
    pub global_bound: f64,
    pub norm_kind: NormKind,
    pub rows: Vec<RowBound>,
}

/// Builds the report for a fixed subset size: per output row, J is chosen
/// by the strategy and the refined bound evaluated.
pub fn bound_report(
    ec: &ErrorCoefficients,
    moments: &InitialMomentEngine,
    j_size: usize,
    strategy: JStrategy,
) -> Result<BoundReport> {
    let norms = moments.moment_norm_table(ec.max_order())?;
    let (gb, kind) = global_bound(ec, &norms);
    let xi = norms.iter().cloned().fold(0.0f64, f64::max);
    let rows = ec.n.pow(ec.j0 as u32);
    let mut out_rows = Vec::with_capacity(rows);
    for i in 0..rows {
        let j_set = choose_j(ec, &norms, i, j_size, strategy);
        let bound = refined_row_bound(ec, moments, i, &j_set)?;
        let xi_j = xi_for_subset(&norms, ec.max_order(), &j_set);
        out_rows.push(RowBound {
            row: i,
            j_set,
            bound,
            xi_j,
        });
    }
    Ok(BoundReport {
        j0: ec.j0,
        t: ec.t,
        n_t: ec.n_t,
        j_size,
        strategy,
        xi,
        global_bound: gb,
        norm_kind: kind,
        rows: out_rows,
    })
}
