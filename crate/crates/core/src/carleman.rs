//! The expected Carleman transfer blocks E_{j,k} = E[A_{j,k}(t)] and the
//! assembled block matrix E(N,M).
//!
//! A_{j,k}(t) = sum over H_{j,k} of F_{i_1}(t) (x) ... (x) F_{i_j}(t), where
//! H_{j,k} collects length-j index sequences with entries <= d_S summing
//! to k. Expanding each F_i over its affine parameter form and grouping
//! terms by parameter-exponent multiset turns the expectation into a finite
//! sum of raw parameter moments times deterministic Kronecker products.
//!
//! H_{j,k} can be astronomically large (it grows like (d_S+1)^j), so the
//! assembled matrix is built by a slot-by-slot recursion over the graded
//! pre-moment blocks
//!
//!   B_j(k, q) = sum_i [ B_{j-1}(k-i, q) (x) C_{i,0}
//!                       + sum_p B_{j-1}(k-i, q - e_p) (x) C_{i,p} ],
//!
//! which sums the same terms as the literal enumeration (Kronecker products
//! are associative) in time polynomial in N, M, and the parameter count.
//! `expected_kron_block` keeps the direct per-sequence expansion as an
//! independent route; the two are cross-checked in the property suite.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::distribution::raw_moment;
use crate::error::{Error, Result};
use crate::kron::{check_size, kron_product, BlockLayout, Mat};
use crate::model::CoefficientModel;

/// The index sequence set H_{j,k}: length-j tuples with entries <= d_S
/// summing to k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSequenceSet {
    pub j: usize,
    pub k: usize,
    pub d_s: usize,
    pub sequences: Vec<Vec<usize>>,
}

/// Exhaustive, duplicate-free enumeration of H_{j,k}.
///
/// H_{0,0} holds exactly the empty sequence; the set is empty when
/// k > j * d_S (and in particular when j = 0 and k > 0).
pub fn enumerate_h(j: usize, k: usize, d_s: usize) -> IndexSequenceSet {
    let mut sequences = Vec::new();
    if k <= j.saturating_mul(d_s) {
        let mut cur = vec![0usize; j];
        fill(&mut sequences, &mut cur, 0, k, d_s);
    }
    IndexSequenceSet { j, k, d_s, sequences }
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, slot: usize, remaining: usize, d_s: usize) {
    let slots_left = cur.len() - slot;
    if slots_left == 0 {
        if remaining == 0 {
            out.push(cur.clone());
        }
        return;
    }
    if remaining > slots_left * d_s {
        return;
    }
    for i in 0..=d_s.min(remaining) {
        cur[slot] = i;
        fill(out, cur, slot + 1, remaining - i, d_s);
    }
}

/// Parameter exponent vector, indexed by parameter.
type ExpVec = Vec<u32>;

fn moment_weight(model: &CoefficientModel, exps: &ExpVec) -> Result<f64> {
    let mut w = 1.0;
    for (p, &e) in exps.iter().enumerate() {
        if e > 0 {
            w *= raw_moment(&model.params()[p], e)?;
        }
    }
    Ok(w)
}

/// E[F_{i_1}(t) (x) ... (x) F_{i_j}(t)] for an explicit index sequence.
///
/// Expands the affine parameter form of every slot ((P+1)^j terms, grouped
/// by exponent multiset before the moment lookup) and replaces parameter
/// monomials by products of raw moments. For a deterministic model this
/// reduces to the plain Kronecker product of the constant matrices.
pub fn expected_kron_block(model: &CoefficientModel, seq: &[usize]) -> Result<Mat> {
    let num_params = model.params().len();
    // Graded partial products: exponent vector -> accumulated Kronecker product.
    let mut partial: BTreeMap<ExpVec, Mat> = BTreeMap::new();
    partial.insert(vec![0u32; num_params], Mat::scalar(1.0));
    for &i in seq {
        assert!(i <= model.degree(), "sequence entry exceeds d_S");
        let mut next: BTreeMap<ExpVec, Mat> = BTreeMap::new();
        for (exps, acc) in &partial {
            if !model.constant(i).is_zero() {
                let prod = kron_product(acc, model.constant(i))?;
                accumulate(&mut next, exps.clone(), prod);
            }
            for (&p, m) in model.linear(i) {
                if m.is_zero() {
                    continue;
                }
                let prod = kron_product(acc, m)?;
                let mut bumped = exps.clone();
                bumped[p] += 1;
                accumulate(&mut next, bumped, prod);
            }
        }
        partial = next;
    }
    let rows = model.n().pow(seq.len() as u32);
    let cols = model.n().pow(seq.iter().sum::<usize>() as u32);
    let mut out = Mat::zeros(rows, cols)?;
    for (exps, mat) in &partial {
        out.axpy(moment_weight(model, exps)?, mat);
    }
    Ok(out)
}

/// E_{j,k}: the zero matrix when H_{j,k} is empty, otherwise the sum of
/// exact expectations over all index sequences.
pub fn build_e_jk(model: &CoefficientModel, j: usize, k: usize) -> Result<Mat> {
    let n = model.n();
    let rows = checked_pow(n, j)?;
    let cols = checked_pow(n, k)?;
    check_size(rows, cols, &format!("E block ({j},{k})"))?;
    if k > j.saturating_mul(model.degree()) {
        return Mat::zeros(rows, cols);
    }
    let graded = graded_blocks_for_row(model, j, k.min(j * model.degree()))?;
    match graded.into_iter().find(|(kk, _)| *kk == k) {
        Some((_, by_exp)) => {
            let mut out = Mat::zeros(rows, cols)?;
            for (exps, mat) in &by_exp {
                out.axpy(moment_weight(model, exps)?, mat);
            }
            Ok(out)
        }
        None => Mat::zeros(rows, cols),
    }
}

fn checked_pow(n: usize, e: usize) -> Result<usize> {
    let mut acc: u128 = 1;
    for _ in 0..e {
        acc = acc.saturating_mul(n as u128);
    }
    if acc > crate::kron::size_limit() as u128 {
        return Err(Error::SizeLimit {
            required: acc,
            allowed: crate::kron::size_limit() as u128,
            context: format!("n^{e} block dimension"),
        });
    }
    Ok(acc as usize)
}

/// The graded pre-moment row for j = 0: a single unit at k = 0.
fn unit_row(model: &CoefficientModel, k_max: usize) -> Vec<BTreeMap<ExpVec, Mat>> {
    let mut row: Vec<BTreeMap<ExpVec, Mat>> = vec![BTreeMap::new(); k_max + 1];
    row[0].insert(vec![0u32; model.params().len()], Mat::scalar(1.0));
    row
}

/// Appends one Kronecker slot: B_{j+1}(k, q) from B_j(k - i, q - e).
/// Target columns are independent work items, computed in parallel with
/// output independent of scheduling.
fn advance_row(
    model: &CoefficientModel,
    row: &[BTreeMap<ExpVec, Mat>],
    k_max: usize,
) -> Result<Vec<BTreeMap<ExpVec, Mat>>> {
    (0..=k_max)
        .into_par_iter()
        .map(|k_new| {
            let mut slot: BTreeMap<ExpVec, Mat> = BTreeMap::new();
            for i in 0..=model.degree().min(k_new) {
                let k_prev = k_new - i;
                if k_prev >= row.len() {
                    continue;
                }
                for (exps, acc) in &row[k_prev] {
                    if !model.constant(i).is_zero() {
                        let prod = kron_product(acc, model.constant(i))?;
                        accumulate(&mut slot, exps.clone(), prod);
                    }
                    for (&p, m) in model.linear(i) {
                        if m.is_zero() {
                            continue;
                        }
                        let prod = kron_product(acc, m)?;
                        let mut bumped = exps.clone();
                        bumped[p] += 1;
                        accumulate(&mut slot, bumped, prod);
                    }
                }
            }
            Ok(slot)
        })
        .collect()
}

/// All graded pre-moment blocks B_j(k, q) for row j, k = 0..=k_max.
/// Entry k holds a map exponent-vector -> matrix (n^j x n^k).
fn graded_blocks_for_row(
    model: &CoefficientModel,
    j: usize,
    k_max: usize,
) -> Result<Vec<(usize, BTreeMap<ExpVec, Mat>)>> {
    let mut row = unit_row(model, k_max);
    for _slot in 0..j {
        row = advance_row(model, &row, k_max)?;
    }
    Ok(row.into_iter().enumerate().collect())
}

fn accumulate(slot: &mut BTreeMap<ExpVec, Mat>, key: ExpVec, mat: Mat) {
    match slot.entry(key) {
        std::collections::btree_map::Entry::Occupied(mut e) => e.get_mut().axpy(1.0, &mat),
        std::collections::btree_map::Entry::Vacant(e) => {
            e.insert(mat);
        }
    }
}

/// The assembled moment-transfer matrix E(N,M) with block (j,k) = E_{j,k}.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedBlockMatrix {
    pub n: usize,
    pub degree: usize,
    pub row_layout: BlockLayout,
    pub col_layout: BlockLayout,
    pub mat: Mat,
}

impl ExpectedBlockMatrix {
    pub fn row_blocks(&self) -> usize {
        self.row_layout.max_block()
    }

    pub fn col_blocks(&self) -> usize {
        self.col_layout.max_block()
    }

    /// Dense copy of block (j, k).
    pub fn block(&self, j: usize, k: usize) -> Mat {
        self.mat.block(
            self.row_layout.offset(j),
            self.col_layout.offset(k),
            self.row_layout.block_len(j),
            self.col_layout.block_len(k),
        )
    }

    /// Rows of block-row j as an n^j x S(n,M) matrix.
    pub fn row_block(&self, j: usize) -> Mat {
        self.mat.block(
            self.row_layout.offset(j),
            0,
            self.row_layout.block_len(j),
            self.col_layout.total_len(),
        )
    }
}

/// Builds E(N,M) densely. One slot-advance pass produces all block rows;
/// within each advance the target columns are parallel work items, keeping
/// the output independent of scheduling.
pub fn build_e(model: &CoefficientModel, nn: usize, mm: usize) -> Result<ExpectedBlockMatrix> {
    let n = model.n();
    let row_layout = BlockLayout::new(n, nn)?;
    let col_layout = BlockLayout::new(n, mm)?;
    check_size(
        row_layout.total_len(),
        col_layout.total_len(),
        &format!("E({nn},{mm}) for n={n}"),
    )?;
    let mut mat = Mat::zeros(row_layout.total_len(), col_layout.total_len())?;

    let mut row = unit_row(model, mm);
    for j in 0..=nn {
        if j > 0 {
            let k_max = mm.min(j.saturating_mul(model.degree()));
            row = advance_row(model, &row, k_max)?;
        }
        for (k, by_exp) in row.iter().enumerate() {
            if by_exp.is_empty() {
                continue;
            }
            let mut block = Mat::zeros(checked_pow(n, j)?, checked_pow(n, k)?)?;
            for (exps, m) in by_exp {
                block.axpy(moment_weight(model, exps)?, m);
            }
            mat.write_block(row_layout.offset(j), col_layout.offset(k), &block);
        }
    }
    Ok(ExpectedBlockMatrix {
        n,
        degree: model.degree(),
        row_layout,
        col_layout,
        mat,
    })
}

// ---------------------------------------------------------------------------
// Propagator cache
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 8] = b"MPROPE1\0";
const CACHE_VERSION: u32 = 1;

/// Cache file name for a given model hash and block extents.
pub fn cache_file_name(model_hash: &str, nn: usize, mm: usize) -> String {
    format!("{model_hash}_{nn}_{mm}.emat")
}

/// Writes the assembled matrix: a fixed header (format version, model hash,
/// n, d_S, N, M) followed by the row-major entries as little-endian f64.
/// Round-trips bit-exactly.
pub fn write_cache(e: &ExpectedBlockMatrix, model_hash: &str, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CACHE_MAGIC)?;
    f.write_all(&CACHE_VERSION.to_le_bytes())?;
    let hash_bytes = model_hash.as_bytes();
    f.write_all(&(hash_bytes.len() as u32).to_le_bytes())?;
    f.write_all(hash_bytes)?;
    for v in [
        e.n as u64,
        e.degree as u64,
        e.row_layout.max_block() as u64,
        e.col_layout.max_block() as u64,
        e.mat.data().len() as u64,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    for v in e.mat.data() {
        f.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

/// Reads a cache file back, verifying format version and model hash.
pub fn read_cache(path: &Path, expect_hash: &str) -> Result<ExpectedBlockMatrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Cache("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != CACHE_VERSION {
        return Err(Error::Cache("unsupported cache version".into()));
    }
    f.read_exact(&mut u32buf)?;
    let hash_len = u32::from_le_bytes(u32buf) as usize;
    if hash_len > 1024 {
        return Err(Error::Cache("unreasonable hash length".into()));
    }
    let mut hash = vec![0u8; hash_len];
    f.read_exact(&mut hash)?;
    if hash != expect_hash.as_bytes() {
        return Err(Error::Cache("model hash mismatch".into()));
    }
    let mut u64buf = [0u8; 8];
    let mut next_u64 = |f: &mut std::io::BufReader<std::fs::File>| -> Result<u64> {
        f.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let n = next_u64(&mut f)? as usize;
    let degree = next_u64(&mut f)? as usize;
    let nn = next_u64(&mut f)? as usize;
    let mm = next_u64(&mut f)? as usize;
    let len = next_u64(&mut f)? as usize;
    let row_layout = BlockLayout::new(n, nn)?;
    let col_layout = BlockLayout::new(n, mm)?;
    let (rows, cols) = (row_layout.total_len(), col_layout.total_len());
    if len != rows * cols {
        return Err(Error::Cache("entry count does not match header".into()));
    }
    check_size(rows, cols, "cached E")?;
    let mut data = vec![0.0f64; len];
    let mut buf = [0u8; 8];
    for v in &mut data {
        f.read_exact(&mut buf)?;
        *v = f64::from_bits(u64::from_le_bytes(buf));
    }
    Ok(ExpectedBlockMatrix {
        n,
        degree,
        row_layout,
        col_layout,
        mat: Mat::from_vec(rows, cols, data)?,
    })
}

/// `build_e` with a disk cache keyed by model hash and (N, M).
pub fn build_e_cached(
    model: &CoefficientModel,
    nn: usize,
    mm: usize,
    model_hash: &str,
    cache_dir: Option<&Path>,
) -> Result<ExpectedBlockMatrix> {
    let cache_path: Option<PathBuf> =
        cache_dir.map(|d| d.join(cache_file_name(model_hash, nn, mm)));
    if let Some(p) = &cache_path {
        if p.exists() {
            match read_cache(p, model_hash) {
                Ok(e) => return Ok(e),
                Err(err) => log::warn!("ignoring stale cache {}: {err}", p.display()),
            }
        }
    }
    let e = build_e(model, nn, mm)?;
    if let Some(p) = &cache_path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_cache(&e, model_hash, p)?;
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::build_logistic_model;
    use crate::distribution::ScalarDistribution;

    fn logistic() -> crate::model::PolynomialSystemSpec {
        build_logistic_model(
            ScalarDistribution::uniform(0.3, 0.7),
            ScalarDistribution::truncated_gaussian(0.5, 0.1, 0.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn h_base_cases() {
        let h = enumerate_h(0, 0, 2);
        assert_eq!(h.sequences, vec![Vec::<usize>::new()]);

        let h = enumerate_h(2, 2, 2);
        assert_eq!(h.sequences.len(), 3);
        let mut seqs = h.sequences.clone();
        seqs.sort();
        assert_eq!(seqs, vec![vec![0, 2], vec![1, 1], vec![2, 0]]);

        assert!(enumerate_h(1, 3, 2).sequences.is_empty());
        assert!(enumerate_h(0, 1, 2).sequences.is_empty());
    }

    #[test]
    fn expected_blocks_logistic() {
        let spec = logistic();
        // seq = (1,1): E[r^2] * (1 (x) 1)
        let m = expected_kron_block(&spec.coeffs, &[1, 1]).unwrap();
        assert!((m.get(0, 0) - 0.26333333333333333).abs() < 1e-14);
        // seq = (2): E[-r]
        let m = expected_kron_block(&spec.coeffs, &[2]).unwrap();
        assert!((m.get(0, 0) + 0.5).abs() < 1e-14);
    }

    #[test]
    fn expected_block_deterministic_is_plain_kron() {
        use std::collections::BTreeMap;
        let c0 = Mat::zeros(2, 1).unwrap();
        let c1 = Mat::from_vec(2, 2, vec![0.5, 0.1, -0.2, 0.9]).unwrap();
        let coeffs = crate::model::CoefficientModel::new(
            2,
            1,
            vec![],
            vec![c0, c1.clone()],
            vec![BTreeMap::new(), BTreeMap::new()],
        )
        .unwrap();
        let m = expected_kron_block(&coeffs, &[1, 1]).unwrap();
        let want = kron_product(&c1, &c1).unwrap();
        for (a, b) in m.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn e_jk_values_logistic() {
        let spec = logistic();
        let e11 = build_e_jk(&spec.coeffs, 1, 1).unwrap();
        assert!((e11.get(0, 0) - 0.5).abs() < 1e-14);
        let e12 = build_e_jk(&spec.coeffs, 1, 2).unwrap();
        assert!((e12.get(0, 0) + 0.5).abs() < 1e-14);
        let e22 = build_e_jk(&spec.coeffs, 2, 2).unwrap();
        assert!((e22.get(0, 0) - 0.26333333333333333).abs() < 1e-14);
        // cap: E_{1,k} = 0 for k > d_S
        let e13 = build_e_jk(&spec.coeffs, 1, 3).unwrap();
        assert!(e13.is_zero());
        // F_0 = 0 kills E_{2,0} and E_{2,1}
        assert!(build_e_jk(&spec.coeffs, 2, 0).unwrap().is_zero());
        assert!(build_e_jk(&spec.coeffs, 2, 1).unwrap().is_zero());
    }

    #[test]
    fn assembled_e_2_2_logistic() {
        let spec = logistic();
        let e = build_e(&spec.coeffs, 2, 2).unwrap();
        assert_eq!(e.mat.rows(), 3);
        assert_eq!(e.mat.cols(), 3);
        let want = [
            [1.0, 0.0, 0.0],
            [0.0, 0.5, -0.5],
            [0.0, 0.0, 0.26333333333333333],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (e.mat.get(i, j) - want[i][j]).abs() < 1e-14,
                    "({i},{j}): {} vs {}",
                    e.mat.get(i, j),
                    want[i][j]
                );
            }
        }
    }

    #[test]
    fn trivial_e_0_0() {
        let spec = logistic();
        let e = build_e(&spec.coeffs, 0, 0).unwrap();
        assert_eq!(e.mat.rows(), 1);
        assert_eq!(e.mat.get(0, 0), 1.0);
    }

    #[test]
    fn vehicle_full_e_exceeds_default_limit() {
        let spec = crate::builders::bicycle_benchmark_model();
        let err = build_e(&spec.coeffs, 8, 8).unwrap_err();
        match err {
            Error::SizeLimit { required, allowed, .. } => {
                assert_eq!(required, 2_015_539u128 * 2_015_539);
                assert!(allowed < required);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cache_roundtrip_bit_exact() {
        let spec = logistic();
        let e = build_e(&spec.coeffs, 4, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emat");
        let hash = spec.content_hash();
        write_cache(&e, &hash, &path).unwrap();
        let back = read_cache(&path, &hash).unwrap();
        assert_eq!(e.mat.data().len(), back.mat.data().len());
        for (a, b) in e.mat.data().iter().zip(back.mat.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Wrong hash is rejected.
        assert!(read_cache(&path, "deadbeef").is_err());
    }
}
