//! Matrix-free application of the truncated moment-transfer map.
//!
//! The dense matrix E(N_T,N_T) has S(n,N_T)^2 entries, which is unusable
//! already for the six-state vehicle model at N_T = 8 (S(6,8) is about
//! 2 * 10^6). This engine applies the same linear map without materializing
//! it, exploiting that every block E_{j,k} is a sum of j-fold Kronecker
//! products of the per-degree coefficient matrices.
//!
//! Writing F_i(t) = C_{i,0} + sum_p w_p(t) C_{i,p} and grading by the
//! parameter exponent vector q, the ladder
//!
//!   T^(0)[k]     = y_k                                   (k <= N_T)
//!   T^(s+1)[k,q] = sum_{i>=1} C_{i,0} . T^(s)[k+i, q]
//!                  + sum_{i>=1, p} C_{i,p} . T^(s)[k+i, q - e_p]
//!
//! contracts one Kronecker slot per stage ("." applies an n x n^i matrix to
//! the leading i input modes and prepends one output mode). After s stages,
//! T^(s)[0,q] collects every length-s slot sequence with all degrees >= 1.
//! Degree-0 slots would grow intermediate tensors without bound, but their
//! columns are fixed n-vectors, so they factor out: a sequence with zero
//! slots at position set S contributes a Kronecker product of the reduced
//! sequence with those vectors, interleaved at the positions of S. The
//! engine therefore scatters T^(j-z)[0,q'] against the z-fold graded outer
//! power of the degree-0 columns over all position subsets of size z.
//!
//! All intermediate tensors have at most n^(N_T) entries, and one full
//! application costs on the order of sum_z C(j,z) n^j operations per block,
//! which keeps the vehicle model at N_T = 8 in seconds per step.

use std::collections::BTreeMap;

use itertools::Itertools;

use crate::distribution::raw_moment;
use crate::error::{Error, Result};
use crate::kron::BlockLayout;
use crate::model::{CoefficientModel, DegreeTriplets};

/// Parameter exponents packed into 8-bit lanes of a u64.
type QKey = u64;

fn q_add(a: QKey, p: usize) -> QKey {
    debug_assert!(p < 8);
    a + (1u64 << (8 * p))
}

fn q_sum(a: QKey, b: QKey) -> QKey {
    a + b
}

fn q_lane(q: QKey, p: usize) -> u32 {
    ((q >> (8 * p)) & 0xff) as u32
}

pub(crate) struct LadderEngine {
    n: usize,
    n_t: usize,
    degree: usize,
    num_params: usize,
    coeffs: Vec<DegreeTriplets>,
    /// Degree-0 constant column, if any entry is nonzero.
    zero_const: Option<Vec<f64>>,
    /// Degree-0 parameter columns (param index, column).
    zero_params: Vec<(usize, Vec<f64>)>,
    moment_cache: std::sync::Mutex<BTreeMap<QKey, f64>>,
    params: Vec<crate::distribution::ScalarDistribution>,
}

impl LadderEngine {
    pub fn new(model: &CoefficientModel, n_t: usize) -> Result<Self> {
        if model.params().len() > 8 {
            return Err(Error::Unsupported(
                "matrix-free propagation supports at most 8 parameters".into(),
            ));
        }
        if n_t > 255 {
            return Err(Error::Unsupported(
                "matrix-free propagation supports N_T <= 255".into(),
            ));
        }
        let compiled = model.compiled();
        let n = model.n();
        let zero = &compiled.per_degree[0];
        let zero_const = if zero.consts.is_empty() {
            None
        } else {
            let mut col = vec![0.0; n];
            for &(r, _, v) in &zero.consts {
                col[r] = v;
            }
            Some(col)
        };
        let zero_params = zero
            .params
            .iter()
            .map(|(p, trips)| {
                let mut col = vec![0.0; n];
                for &(r, _, v) in trips {
                    col[r] = v;
                }
                (*p, col)
            })
            .collect();
        Ok(LadderEngine {
            n,
            n_t,
            degree: model.degree(),
            num_params: model.params().len(),
            coeffs: compiled.per_degree,
            zero_const,
            zero_params,
            moment_cache: std::sync::Mutex::new(BTreeMap::new()),
            params: model.params().to_vec(),
        })
    }

    fn moment(&self, q: QKey) -> Result<f64> {
        if q == 0 {
            return Ok(1.0);
        }
        if let Some(&v) = self.moment_cache.lock().unwrap().get(&q) {
            return Ok(v);
        }
        let mut v = 1.0;
        for p in 0..self.num_params {
            let e = q_lane(q, p);
            if e > 0 {
                v *= raw_moment(&self.params[p], e)?;
            }
        }
        self.moment_cache.lock().unwrap().insert(q, v);
        Ok(v)
    }

    /// Applies the truncated transfer map to a stacked vector.
    pub fn apply(&self, y: &[f64], layout: &BlockLayout) -> Result<Vec<f64>> {
        let n = self.n;
        let n_t = self.n_t;
        assert_eq!(layout.max_block(), n_t);
        assert_eq!(y.len(), layout.total_len());

        // Reduced ladder over slots of degree >= 1. States keyed by
        // (remaining input degree k, exponent key); tensor layout is
        // [k input modes | s output modes], row-major, length n^(k+s).
        let mut stage: BTreeMap<(usize, QKey), Vec<f64>> = BTreeMap::new();
        for k in 0..=n_t {
            let block = &y[layout.offset(k)..layout.offset(k) + layout.block_len(k)];
            stage.insert((k, 0), block.to_vec());
        }
        // reduced_results[s]: map q -> T^(s)[0,q] of length n^s.
        let mut reduced: Vec<BTreeMap<QKey, Vec<f64>>> = Vec::with_capacity(n_t + 1);
        reduced.push(collect_k0(&mut stage));

        for s in 0..n_t {
            let mut next: BTreeMap<(usize, QKey), Vec<f64>> = BTreeMap::new();
            let out_inner = checked_len(n, s + 1)?;
            let in_inner = checked_len(n, s)?;
            for (&(k_src, q), tensor) in &stage {
                // Slot consumes i of the k_src leading modes; the target
                // keeps k_src - i of them.
                for i in 1..=self.degree.min(k_src) {
                    let k_dst = k_src - i;
                    let alpha_count = checked_len(n, k_dst)?;
                    let a_count = checked_len(n, i)?;
                    let deg = &self.coeffs[i];
                    if !deg.consts.is_empty() {
                        let dst = entry(&mut next, (k_dst, q), alpha_count * out_inner);
                        contract(
                            dst, tensor, &deg.consts, alpha_count, a_count, in_inner, out_inner,
                        );
                    }
                    for (p, trips) in &deg.params {
                        if trips.is_empty() {
                            continue;
                        }
                        let dst = entry(&mut next, (k_dst, q_add(q, *p)), alpha_count * out_inner);
                        contract(dst, tensor, trips, alpha_count, a_count, in_inner, out_inner);
                    }
                }
            }
            stage = next;
            reduced.push(collect_k0(&mut stage));
        }

        // Graded outer powers of the degree-0 columns: zero_pow[z] maps
        // exponent key -> tensor of length n^z.
        let has_zero = self.zero_const.is_some() || !self.zero_params.is_empty();
        let max_z = if has_zero { n_t } else { 0 };
        let mut zero_pow: Vec<BTreeMap<QKey, Vec<f64>>> = Vec::with_capacity(max_z + 1);
        let mut unit = BTreeMap::new();
        unit.insert(0u64, vec![1.0]);
        zero_pow.push(unit);
        for z in 0..max_z {
            let mut next: BTreeMap<QKey, Vec<f64>> = BTreeMap::new();
            for (&q, t) in &zero_pow[z] {
                if let Some(col) = &self.zero_const {
                    outer_accumulate(entry_q(&mut next, q, t.len() * n), t, col);
                }
                for (p, col) in &self.zero_params {
                    outer_accumulate(entry_q(&mut next, q_add(q, *p), t.len() * n), t, col);
                }
            }
            zero_pow.push(next);
        }

        // Assemble output blocks.
        let mut out = vec![0.0; layout.total_len()];
        out[0] = 1.0;
        let mut map_red: Vec<u32> = Vec::new();
        let mut map_zero: Vec<u32> = Vec::new();
        for j in 1..=n_t {
            let block_len = layout.block_len(j);
            let (out_lo, out_hi) = (layout.offset(j), layout.offset(j) + block_len);
            let w = &mut out[out_lo..out_hi];
            // z = 0: no interleaving.
            for (&q, t) in &reduced[j] {
                let mu = self.moment(q)?;
                if mu != 0.0 {
                    for (o, &v) in w.iter_mut().zip(t) {
                        *o += mu * v;
                    }
                }
            }
            for z in 1..=j.min(max_z) {
                let s_red = j - z;
                if reduced[s_red].is_empty() || zero_pow[z].is_empty() {
                    continue;
                }
                for positions in (0..j).combinations(z) {
                    build_scatter_maps(n, j, &positions, &mut map_zero, &mut map_red);
                    for (&qr, tr) in &reduced[s_red] {
                        for (&qz, tz) in &zero_pow[z] {
                            let mu = self.moment(q_sum(qr, qz))?;
                            if mu == 0.0 {
                                continue;
                            }
                            for (uz, &zv) in tz.iter().enumerate() {
                                let scale = mu * zv;
                                if scale == 0.0 {
                                    continue;
                                }
                                let base = map_zero[uz] as usize;
                                for (ur, &rv) in tr.iter().enumerate() {
                                    w[base + map_red[ur] as usize] += scale * rv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn checked_len(n: usize, e: usize) -> Result<usize> {
    let mut acc: u128 = 1;
    for _ in 0..e {
        acc *= n as u128;
    }
    if acc > crate::kron::size_limit() as u128 {
        return Err(Error::SizeLimit {
            required: acc,
            allowed: crate::kron::size_limit() as u128,
            context: "matrix-free intermediate tensor".into(),
        });
    }
    Ok(acc as usize)
}

fn entry<'m>(
    map: &'m mut BTreeMap<(usize, QKey), Vec<f64>>,
    key: (usize, QKey),
    len: usize,
) -> &'m mut Vec<f64> {
    map.entry(key).or_insert_with(|| vec![0.0; len])
}

fn entry_q<'m>(map: &'m mut BTreeMap<QKey, Vec<f64>>, key: QKey, len: usize) -> &'m mut Vec<f64> {
    map.entry(key).or_insert_with(|| vec![0.0; len])
}

/// Extracts the fully-contracted (k = 0) tensors; they never transition
/// again, so they are moved out rather than copied.
fn collect_k0(stage: &mut BTreeMap<(usize, QKey), Vec<f64>>) -> BTreeMap<QKey, Vec<f64>> {
    let keys: Vec<(usize, QKey)> = stage
        .range((0, 0)..(1, 0))
        .map(|(k, _)| *k)
        .collect();
    keys.into_iter()
        .map(|key| (key.1, stage.remove(&key).unwrap()))
        .collect()
}

/// dst[alpha, b, B] += M[b, a] * src[alpha, a, B] with M in triplet form.
fn contract(
    dst: &mut [f64],
    src: &[f64],
    triplets: &[(usize, usize, f64)],
    alpha_count: usize,
    a_count: usize,
    in_inner: usize,
    out_inner_total: usize,
) {
    let n_out = out_inner_total / in_inner; // = n
    for alpha in 0..alpha_count {
        let src_base = alpha * a_count * in_inner;
        let dst_base = alpha * out_inner_total;
        for &(b, a, v) in triplets {
            let s = &src[src_base + a * in_inner..src_base + (a + 1) * in_inner];
            let d = &mut dst[dst_base + b * in_inner..dst_base + (b + 1) * in_inner];
            debug_assert!(b < n_out);
            for (o, &x) in d.iter_mut().zip(s) {
                *o += v * x;
            }
        }
    }
}

/// dst[u, b] += t[u] * col[b]
fn outer_accumulate(dst: &mut [f64], t: &[f64], col: &[f64]) {
    let n = col.len();
    for (u, &tv) in t.iter().enumerate() {
        if tv == 0.0 {
            continue;
        }
        let d = &mut dst[u * n..(u + 1) * n];
        for (o, &c) in d.iter_mut().zip(col) {
            *o += tv * c;
        }
    }
}

/// Index maps for interleaving: digit l of the zero tensor goes to output
/// position `positions[l]`, digits of the reduced tensor fill the rest, both
/// most-significant-first. Built incrementally (odometer) to stay O(n^len).
fn build_scatter_maps(
    n: usize,
    j: usize,
    positions: &[usize],
    map_zero: &mut Vec<u32>,
    map_red: &mut Vec<u32>,
) {
    let mut weight = vec![0u64; j];
    let mut w = 1u64;
    for pos in (0..j).rev() {
        weight[pos] = w;
        w *= n as u64;
    }
    let zero_weights: Vec<u64> = positions.iter().map(|&p| weight[p]).collect();
    let red_weights: Vec<u64> = (0..j)
        .filter(|p| !positions.contains(p))
        .map(|p| weight[p])
        .collect();
    fill_map(n, &zero_weights, map_zero);
    fill_map(n, &red_weights, map_red);
}

fn fill_map(n: usize, weights: &[u64], map: &mut Vec<u32>) {
    let len = n.pow(weights.len() as u32);
    map.clear();
    map.reserve(len);
    let mut digits = vec![0usize; weights.len()];
    let mut offset = 0u64;
    map.push(0);
    for _ in 1..len {
        // Increment the least significant digit with carries.
        for d in (0..weights.len()).rev() {
            digits[d] += 1;
            offset += weights[d];
            if digits[d] < n {
                break;
            }
            digits[d] = 0;
            offset -= weights[d] * n as u64;
        }
        map.push(offset as u32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_maps_cover_all_positions() {
        // j=3, n=2, zero slot in the middle: every output index must be hit
        // exactly once by (zero digit, reduced digits).
        let mut mz = Vec::new();
        let mut mr = Vec::new();
        build_scatter_maps(2, 3, &[1], &mut mz, &mut mr);
        assert_eq!(mz.len(), 2);
        assert_eq!(mr.len(), 4);
        let mut seen = vec![false; 8];
        for &z in &mz {
            for &r in &mr {
                let idx = (z + r) as usize;
                assert!(!seen[idx]);
                seen[idx] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        // zero digit occupies the middle position: weight 2^1 = 2
        assert_eq!(mz, vec![0, 2]);
    }

    #[test]
    fn fill_map_matches_direct_digit_expansion() {
        let weights = vec![9u64, 3, 1];
        let mut map = Vec::new();
        fill_map(3, &weights, &mut map);
        for (idx, &off) in map.iter().enumerate() {
            let d0 = idx / 9;
            let d1 = (idx / 3) % 3;
            let d2 = idx % 3;
            assert_eq!(off as u64, weights[0] * d0 as u64 + weights[1] * d1 as u64 + weights[2] * d2 as u64);
        }
    }
}
