//! Ground-truth engines: seeded Monte Carlo simulation and exact
//! enumeration over finite-support randomness.
//!
//! Randomness follows a counter-based contract: every (sample index,
//! time step, draw index) tuple maps to its own ChaCha stream, so samples
//! can be generated in parallel in any order and still produce bit-identical
//! results for a given seed. Aggregation uses a fixed pairwise-tree
//! reduction to keep floating-point sums independent of thread scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kron::{check_size, euclidean_norm, kron_power_vec};
use crate::model::PolynomialSystemSpec;

const PURPOSE_PARAM: u64 = 0;
const PURPOSE_INIT: u64 = 1;

/// One uniform in [0,1) from the stream addressed by (sample, purpose, t, idx).
fn stream_u01(seed: u64, sample: u64, purpose: u64, t: u64, idx: u64) -> f64 {
    debug_assert!(t < (1 << 16) && idx < (1 << 8));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream((sample << 32) | (purpose << 24) | (t << 8) | idx);
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn draw_initial_state(spec: &PolynomialSystemSpec, seed: u64, sample: u64) -> Vec<f64> {
    let uniforms: Vec<f64> = (0..spec.init.sources.len())
        .map(|i| stream_u01(seed, sample, PURPOSE_INIT, 0, i as u64))
        .collect();
    spec.init.sample_from_uniforms(&uniforms)
}

fn draw_params(spec: &PolynomialSystemSpec, seed: u64, sample: u64, t: usize) -> Vec<f64> {
    spec.coeffs
        .params()
        .iter()
        .enumerate()
        .map(|(p, d)| {
            d.sample_from_uniform(stream_u01(seed, sample, PURPOSE_PARAM, t as u64, p as u64))
        })
        .collect()
}

fn trajectory_indexed(
    spec: &PolynomialSystemSpec,
    t: usize,
    seed: u64,
    sample: u64,
) -> Result<Vec<Vec<f64>>> {
    let compiled = spec.coeffs.compiled();
    let mut states = Vec::with_capacity(t + 1);
    states.push(draw_initial_state(spec, seed, sample));
    for step in 0..t {
        let w = draw_params(spec, seed, sample, step);
        let next = compiled.step(states.last().unwrap(), &w);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

/// Simulates one trajectory x(0..=t) of the system; deterministic given seed.
pub fn sample_trajectory(
    spec: &PolynomialSystemSpec,
    t: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    trajectory_indexed(spec, t, seed, 0)
}

/// Sample mean of x^[j](t) plus per-entry standard errors.
///
/// Diverged samples are excluded and counted in `excluded`.
#[derive(Debug, Clone)]
pub struct EmpiricalMoments {
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub used_samples: usize,
    pub excluded: usize,
}

/// Samples per aggregation chunk. Chunk boundaries are fixed by sample
/// index, so parallel execution cannot change any floating-point sum.
const CHUNK: usize = 256;

struct ChunkStats {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    used: usize,
    excluded: usize,
}

/// Pairwise-tree combination of per-chunk partial sums.
fn tree_combine(chunks: &[ChunkStats]) -> ChunkStats {
    match chunks.len() {
        1 => ChunkStats {
            sum: chunks[0].sum.clone(),
            sum_sq: chunks[0].sum_sq.clone(),
            used: chunks[0].used,
            excluded: chunks[0].excluded,
        },
        len => {
            let mid = len / 2;
            let l = tree_combine(&chunks[..mid]);
            let r = tree_combine(&chunks[mid..]);
            ChunkStats {
                sum: l.sum.iter().zip(&r.sum).map(|(a, b)| a + b).collect(),
                sum_sq: l.sum_sq.iter().zip(&r.sum_sq).map(|(a, b)| a + b).collect(),
                used: l.used + r.used,
                excluded: l.excluded + r.excluded,
            }
        }
    }
}

pub fn empirical_moments(
    spec: &PolynomialSystemSpec,
    j: usize,
    t: usize,
    num_samples: usize,
    seed: u64,
) -> Result<EmpiricalMoments> {
    if num_samples < 2 {
        return Err(Error::validation("empirical moments need at least 2 samples"));
    }
    let n = spec.coeffs.n();
    let len = n.pow(j as u32);
    check_size(len, 1, "empirical moment block")?;
    let ranges: Vec<(usize, usize)> = (0..num_samples)
        .step_by(CHUNK)
        .map(|lo| (lo, (lo + CHUNK).min(num_samples)))
        .collect();
    let chunks: Vec<ChunkStats> = ranges
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut sum = vec![0.0; len];
            let mut sum_sq = vec![0.0; len];
            let mut used = 0;
            let mut excluded = 0;
            for s in lo..hi {
                match trajectory_indexed(spec, t, seed, s as u64) {
                    Ok(traj) => {
                        let xp = kron_power_vec(&traj[t], j).expect("block within size limit");
                        for (i, v) in xp.iter().enumerate() {
                            sum[i] += v;
                            sum_sq[i] += v * v;
                        }
                        used += 1;
                    }
                    Err(_) => excluded += 1,
                }
            }
            ChunkStats { sum, sum_sq, used, excluded }
        })
        .collect();
    let total = tree_combine(&chunks);
    if total.used < 2 {
        return Err(Error::validation(
            "fewer than 2 finite samples; system diverges almost surely",
        ));
    }
    let m = total.used as f64;
    let mean: Vec<f64> = total.sum.iter().map(|s| s / m).collect();
    let standard_error: Vec<f64> = total
        .sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| {
            let var = ((sq - m * mu * mu) / (m - 1.0)).max(0.0);
            (var / m).sqrt()
        })
        .collect();
    Ok(EmpiricalMoments {
        mean,
        standard_error,
        used_samples: total.used,
        excluded: total.excluded,
    })
}

/// Exact E[x^[j](t)] by enumerating every parameter / initial-value path.
///
/// Requires finite-support randomness everywhere and a total path count of
/// at most 10^6.
pub fn exact_enumeration_moments(
    spec: &PolynomialSystemSpec,
    j: usize,
    t: usize,
) -> Result<Vec<f64>> {
    const MAX_PATHS: u128 = 1_000_000;
    let init_atoms: Vec<Vec<(f64, f64)>> = spec
        .init
        .sources
        .iter()
        .map(|d| {
            d.atoms().ok_or_else(|| {
                Error::Unsupported(
                    "exact enumeration requires finite-support initial sources".into(),
                )
            })
        })
        .collect::<Result<_>>()?;
    let param_atoms: Vec<Vec<(f64, f64)>> = spec
        .coeffs
        .params()
        .iter()
        .map(|d| {
            d.atoms().ok_or_else(|| {
                Error::Unsupported("exact enumeration requires finite-support parameters".into())
            })
        })
        .collect::<Result<_>>()?;

    let init_count: u128 = init_atoms.iter().map(|a| a.len() as u128).product();
    let per_step: u128 = param_atoms.iter().map(|a| a.len() as u128).product();
    let total = init_count * per_step.pow(t as u32);
    if total > MAX_PATHS {
        return Err(Error::Unsupported(format!(
            "enumeration would visit {total} paths, limit is {MAX_PATHS}"
        )));
    }

    let compiled = spec.coeffs.compiled();
    // Weighted initial states.
    let mut paths: Vec<(Vec<f64>, f64)> = cartesian(&init_atoms)
        .into_iter()
        .map(|(vals, p)| {
            let x0: Vec<f64> = spec.init.components.iter().map(|c| c.eval(&vals)).collect();
            (x0, p)
        })
        .collect();
    let step_draws = cartesian(&param_atoms);
    for _ in 0..t {
        let mut next = Vec::with_capacity(paths.len() * step_draws.len());
        for (x, p) in &paths {
            for (w, pw) in &step_draws {
                next.push((compiled.step(x, w), p * pw));
            }
        }
        paths = next;
    }
    let n = spec.coeffs.n();
    let len = n.pow(j as u32);
    check_size(len, 1, "enumeration moment block")?;
    let mut out = vec![0.0; len];
    for (x, p) in &paths {
        let xp = kron_power_vec(x, j)?;
        for (o, v) in out.iter_mut().zip(&xp) {
            *o += p * v;
        }
    }
    Ok(out)
}

/// All value/probability combinations of independent finite sources.
fn cartesian(atoms: &[Vec<(f64, f64)>]) -> Vec<(Vec<f64>, f64)> {
    let mut out = vec![(Vec::new(), 1.0)];
    for dim in atoms {
        let mut next = Vec::with_capacity(out.len() * dim.len());
        for (vals, p) in &out {
            for (v, pv) in dim {
                let mut vals = vals.clone();
                vals.push(*v);
                next.push((vals, p * pv));
            }
        }
        out = next;
    }
    out
}

/// Empirical frequency of ||x(t) - center|| >= alpha plus its binomial
/// standard error.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalTail {
    pub frequency: f64,
    pub standard_error: f64,
    pub used_samples: usize,
    pub excluded: usize,
}

pub fn empirical_tail(
    spec: &PolynomialSystemSpec,
    center: &[f64],
    alpha: f64,
    t: usize,
    num_samples: usize,
    seed: u64,
) -> Result<EmpiricalTail> {
    if num_samples == 0 {
        return Err(Error::validation("tail estimation needs at least 1 sample"));
    }
    let outcomes: Vec<Option<bool>> = (0..num_samples)
        .into_par_iter()
        .map(|s| {
            trajectory_indexed(spec, t, seed, s as u64).ok().map(|traj| {
                let d: Vec<f64> = traj[t].iter().zip(center).map(|(a, b)| a - b).collect();
                euclidean_norm(&d) >= alpha
            })
        })
        .collect();
    let kept: Vec<bool> = outcomes.iter().flatten().cloned().collect();
    let excluded = num_samples - kept.len();
    if kept.is_empty() {
        return Err(Error::validation("no finite samples"));
    }
    let m = kept.len() as f64;
    let hits = kept.iter().filter(|&&b| b).count() as f64;
    let frequency = hits / m;
    let standard_error = (frequency * (1.0 - frequency) / m).sqrt();
    Ok(EmpiricalTail {
        frequency,
        standard_error,
        used_samples: kept.len(),
        excluded,
    })
}
