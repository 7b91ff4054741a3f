//! Kronecker product/power primitives and block-index bookkeeping for
//! stacked vectors of dimension S(n,k) = sum_{i=0}^k n^i.
//!
//! Everything here is dense row-major f64. The matrices are small-dimension,
//! large-power objects and the expectation blocks are generally dense, so a
//! flat `Vec<f64>` wins on simplicity and predictable performance. A global
//! element-count limit guards the exponential blowup inherent to Kronecker
//! powers; exceeding it is a reported error, never an abort.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Default per-matrix element-count limit (10^7 entries).
pub const DEFAULT_SIZE_LIMIT: u64 = 10_000_000;

static SIZE_LIMIT: AtomicU64 = AtomicU64::new(DEFAULT_SIZE_LIMIT);

/// Current per-matrix element-count limit.
pub fn size_limit() -> u64 {
    SIZE_LIMIT.load(Ordering::Relaxed)
}

/// Sets the global per-matrix element-count limit.
pub fn set_size_limit(limit: u64) {
    SIZE_LIMIT.store(limit.max(1), Ordering::Relaxed);
}

/// Errors out when an allocation of `rows * cols` elements would exceed the
/// configured limit.
pub fn check_size(rows: usize, cols: usize, context: &str) -> Result<()> {
    let required = rows as u128 * cols as u128;
    let allowed = size_limit() as u128;
    if required > allowed {
        return Err(Error::SizeLimit {
            required,
            allowed,
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        check_size(rows, cols, "matrix allocation")?;
        Ok(Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        check_size(r, c, "matrix allocation")?;
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_size(rows, cols, "matrix allocation")?;
        assert_eq!(data.len(), rows * cols);
        Ok(Mat { rows, cols, data })
    }

    /// 1x1 matrix holding a single scalar; the k=0 Kronecker power of anything.
    pub fn scalar(v: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Mat::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += s * other (same shape).
    pub fn axpy(&mut self, s: f64, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        assert_eq!(self.cols, rhs.rows, "inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols)?;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Copies `block` into self with its (0,0) entry at (row_off, col_off).
    pub fn write_block(&mut self, row_off: usize, col_off: usize, block: &Mat) {
        assert!(row_off + block.rows <= self.rows && col_off + block.cols <= self.cols);
        for i in 0..block.rows {
            let dst = (row_off + i) * self.cols + col_off;
            self.data[dst..dst + block.cols]
                .copy_from_slice(&block.data[i * block.cols..(i + 1) * block.cols]);
        }
    }

    pub fn block(&self, row_off: usize, col_off: usize, rows: usize, cols: usize) -> Mat {
        let mut out = Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        };
        for i in 0..rows {
            let src = (row_off + i) * self.cols + col_off;
            out.data[i * cols..(i + 1) * cols].copy_from_slice(&self.data[src..src + cols]);
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest singular value via power iteration on A^T A.
    ///
    /// The Rayleigh quotient converges to sigma_max^2 whenever the start
    /// vector has a component in the top singular subspace; the all-ones
    /// start plus a deterministic perturbation makes that overwhelmingly
    /// likely, and the tight tolerance leaves no practical gap on the small
    /// blocks this is used for (a 1 x m block is exact after one sweep).
    pub fn spectral_norm(&self) -> f64 {
        if self.data.iter().all(|&v| v == 0.0) {
            return 0.0;
        }
        let n = self.cols;
        let mut z: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 1e-3).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nz = norm(&z);
        for v in &mut z {
            *v /= nz;
        }
        let mut lambda = 0.0f64;
        for _ in 0..10_000 {
            let az = self.matvec(&z);
            // w = A^T (A z)
            let mut w = vec![0.0; n];
            for i in 0..self.rows {
                let a = az[i];
                if a == 0.0 {
                    continue;
                }
                let row = &self.data[i * n..(i + 1) * n];
                for (wj, &r) in w.iter_mut().zip(row) {
                    *wj += a * r;
                }
            }
            let new_lambda = norm(&w);
            if new_lambda == 0.0 {
                return 0.0;
            }
            for v in &mut w {
                *v /= new_lambda;
            }
            let done = (new_lambda - lambda).abs() <= 1e-14 * new_lambda.max(1.0);
            lambda = new_lambda;
            z = w;
            if done {
                break;
            }
        }
        lambda.sqrt()
    }
}

/// Euclidean norm of a vector slice.
pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Kronecker product: entry ((i-1)r+k, (j-1)s+l) = A(i,j) B(k,l).
pub fn kron_product(a: &Mat, b: &Mat) -> Result<Mat> {
    check_size(a.rows * b.rows, a.cols * b.cols, "kron_product")?;
    let mut out = Mat::zeros(a.rows * b.rows, a.cols * b.cols)?;
    for ia in 0..a.rows {
        for ja in 0..a.cols {
            let av = a.get(ia, ja);
            if av == 0.0 {
                continue;
            }
            for ib in 0..b.rows {
                let dst = (ia * b.rows + ib) * out.cols + ja * b.cols;
                let src = ib * b.cols;
                for jb in 0..b.cols {
                    out.data[dst + jb] += av * b.data[src + jb];
                }
            }
        }
    }
    Ok(out)
}

/// k-th Kronecker power: M^[0] = 1, M^[k] = M^[k-1] (x) M.
pub fn kron_power(m: &Mat, k: usize) -> Result<Mat> {
    let mut out = Mat::scalar(1.0);
    for _ in 0..k {
        out = kron_product(&out, m)?;
    }
    Ok(out)
}

/// Kronecker power of a (column) vector, as a flat vector of length n^k.
pub fn kron_power_vec(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut out = vec![1.0];
    for _ in 0..k {
        check_size(out.len() * v.len(), 1, "kron_power_vec")?;
        let mut next = Vec::with_capacity(out.len() * v.len());
        for &a in &out {
            for &b in v {
                next.push(a * b);
            }
        }
        out = next;
    }
    Ok(out)
}

/// Block layout of a stacked vector [x^[0]; x^[1]; ...; x^[max_block]].
///
/// Block 0 is the scalar 1 slot; block j has length n^j and starts at
/// `offset(j)`. Total length is S(n, max_block).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    n: usize,
    max_block: usize,
    offsets: Vec<usize>,
}

impl BlockLayout {
    pub fn new(n: usize, max_block: usize) -> Result<Self> {
        assert!(n >= 1, "state dimension must be positive");
        let mut offsets = Vec::with_capacity(max_block + 2);
        let mut total: u128 = 0;
        let mut power: u128 = 1;
        offsets.push(0usize);
        for j in 0..=max_block {
            total += power;
            if total > size_limit() as u128 {
                return Err(Error::SizeLimit {
                    required: total,
                    allowed: size_limit() as u128,
                    context: format!("stacked vector S({n},{max_block})"),
                });
            }
            offsets.push(total as usize);
            if j < max_block {
                power *= n as u128;
            }
        }
        Ok(BlockLayout { n, max_block, offsets })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn max_block(&self) -> usize {
        self.max_block
    }

    /// Start position of block j.
    pub fn offset(&self, j: usize) -> usize {
        self.offsets[j]
    }

    /// Length of block j, i.e. n^j.
    pub fn block_len(&self, j: usize) -> usize {
        self.offsets[j + 1] - self.offsets[j]
    }

    /// Total stacked length S(n, max_block).
    pub fn total_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }
}

/// Block j of a stacked vector; block 0 is the scalar 1 slot.
pub fn stacked_view<'a>(v: &'a [f64], layout: &BlockLayout, j: usize) -> Result<&'a [f64]> {
    if j > layout.max_block() {
        return Err(Error::BlockOutOfRange {
            index: j,
            max: layout.max_block(),
        });
    }
    assert_eq!(v.len(), layout.total_len(), "stacked vector length mismatch");
    Ok(&v[layout.offset(j)..layout.offset(j) + layout.block_len(j)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn kron_of_row_vectors() {
        let a = mat(1, 2, &[1.0, 2.0]);
        let b = mat(1, 2, &[3.0, 4.0]);
        let p = kron_product(&a, &b).unwrap();
        assert_eq!(p.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn kron_with_identity_scalar() {
        let a = mat(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 7.0]);
        let p = kron_product(&a, &Mat::scalar(1.0)).unwrap();
        assert_eq!(p, a);
        let q = kron_product(&Mat::scalar(1.0), &a).unwrap();
        assert_eq!(q, a);
    }

    #[test]
    fn kron_power_base_cases() {
        let m = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p0 = kron_power(&m, 0).unwrap();
        assert_eq!(p0.data(), &[1.0]);
        let s = kron_power(&Mat::scalar(2.0), 3).unwrap();
        assert_eq!(s.data(), &[8.0]);
        let v = kron_power_vec(&[1.0, 1.0], 2).unwrap();
        assert_eq!(v, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mixed_product_identity_2x2() {
        // (A (x) B)(C (x) D) = (AC) (x) (BD)
        let a = mat(2, 2, &[0.3, -1.2, 0.7, 2.0]);
        let b = mat(2, 2, &[1.5, 0.2, -0.4, 0.9]);
        let c = mat(2, 2, &[2.0, 0.1, 0.0, -1.1]);
        let d = mat(2, 2, &[0.6, -0.5, 1.3, 0.8]);
        let lhs = kron_product(&a, &b)
            .unwrap()
            .matmul(&kron_product(&c, &d).unwrap())
            .unwrap();
        let rhs = kron_product(&a.matmul(&c).unwrap(), &b.matmul(&d).unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_offsets_and_views() {
        let l = BlockLayout::new(1, 2).unwrap();
        let v = [1.0, 0.5, 0.25];
        assert_eq!(stacked_view(&v, &l, 2).unwrap(), &[0.25]);

        let l2 = BlockLayout::new(2, 1).unwrap();
        assert_eq!(l2.total_len(), 3);

        let l6 = BlockLayout::new(6, 8).unwrap();
        assert_eq!(l6.total_len(), 2_015_539);
        assert_eq!(l6.offset(1) - l6.offset(0), 1);
        for j in 0..8 {
            assert_eq!(l6.offset(j + 1) - l6.offset(j), 6usize.pow(j as u32));
        }
    }

    #[test]
    fn view_out_of_range() {
        let l = BlockLayout::new(2, 1).unwrap();
        let v = [1.0, 2.0, 3.0];
        assert!(matches!(
            stacked_view(&v, &l, 2),
            Err(Error::BlockOutOfRange { index: 2, max: 1 })
        ));
    }

    #[test]
    fn size_limit_reported() {
        let err = Mat::zeros(100_000, 100_001).unwrap_err();
        match err {
            Error::SizeLimit { required, allowed, .. } => {
                assert_eq!(required, 100_000u128 * 100_001);
                assert_eq!(allowed, DEFAULT_SIZE_LIMIT as u128);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn spectral_norm_known_values() {
        // diag(3, 2) has spectral norm 3
        let d = mat(2, 2, &[3.0, 0.0, 0.0, 2.0]);
        assert!((d.spectral_norm() - 3.0).abs() < 1e-10);
        // row vector: spectral norm equals Euclidean norm
        let r = mat(1, 3, &[1.0, 2.0, 2.0]);
        assert!((r.spectral_norm() - 3.0).abs() < 1e-12);
        // zero matrix
        assert_eq!(Mat::zeros(3, 3).unwrap().spectral_norm(), 0.0);
        // [[1,1],[0,1]]: sigma_max = golden ratio
        let m = mat(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        assert!((m.spectral_norm() - phi).abs() < 1e-9);
    }
}
