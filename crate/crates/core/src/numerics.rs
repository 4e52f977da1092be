//! Dense row-major matrices and vectors in `f64`, softmax, outer products,
//! a seeded random stream, and the central-difference gradient oracle that
//! the rest of the crate's tests lean on.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, numeric, Result};

/// A dense vector of finite `f64` values.
#[derive(Clone, PartialEq, Default)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self { data: vec![value; dim] }
    }

    /// Standard basis vector `e_index` (zero based) of length `dim`.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.data[index] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.data, other)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Self { data: data.to_vec() }
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.iter()).finish()
    }
}

/// A dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return domain(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            ));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return numeric("matrix data contains non-finite entries");
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return domain("ragged rows");
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Fills a matrix with independent `N(0, std^2)` draws.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Self { rows, cols, data }
    }

    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect::<Vec<_>>().into()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute entrywise difference; `INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        max_abs_diff(&self.data, &other.data)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(factor, &other.data, &mut self.data);
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

/// Numerically stable softmax: the maximum is always subtracted first.
pub fn softmax(v: &[f64]) -> Result<Vector> {
    if v.is_empty() {
        return domain("softmax of an empty vector");
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    if !out.iter().all(|x| x.is_finite()) {
        return numeric("softmax produced non-finite output");
    }
    Ok(out.into())
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Outer product `[x ⊗ y]_{ij} = x_i y_j`.
pub fn outer(x: &[f64], y: &[f64]) -> Result<Matrix> {
    if x.is_empty() || y.is_empty() {
        return domain("outer product of an empty vector");
    }
    let mut m = Matrix::zeros(x.len(), y.len());
    for (i, &xi) in x.iter().enumerate() {
        for (o, &yj) in m.row_mut(i).iter_mut().zip(y) {
            *o = xi * yj;
        }
    }
    if !m.is_finite() {
        return numeric("outer product overflowed");
    }
    Ok(m)
}

/// Checked matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return domain(format!(
            "matmul shape mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(&a.data, a.rows, a.cols, &b.data, b.cols, &mut out.data);
    if !out.is_finite() {
        return numeric("matmul overflowed");
    }
    Ok(out)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vector>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return domain("finite difference step must be positive");
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return numeric(format!("function is not finite near coordinate {i}"));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad.into())
}

/// Deterministic random stream backed by ChaCha8 (a fixed, portable algorithm:
/// equal seeds give equal streams on every platform).
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this stream's seed and a label.
    pub fn fork(&self, label: u64) -> Self {
        Self::new(self.seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}

// ---------------------------------------------------------------------------
// Slice kernels used on the hot paths. Shapes are the caller's responsibility.
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // Four independent partial sums let the compiler vectorize.
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `out = a (m×k) · b (k×n)`, overwriting `out`.
pub(crate) fn gemm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    dgemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, out);
}

/// `out += a (m×k) · b (k×n)`.
pub(crate) fn gemm_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    dgemm(m, k, n, a, (k, 1), b, (n, 1), 1.0, out);
}

/// `out += aᵀ · b` where `a` is k×m and `b` is k×n (out is m×n).
pub(crate) fn gemm_tn_acc(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    dgemm(m, k, n, a, (1, m), b, (n, 1), 1.0, out);
}

/// `out += a · bᵀ` where `a` is m×k and `b` is n×k (out is m×n).
pub(crate) fn gemm_nt_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    dgemm(m, k, n, a, (k, 1), b, (1, k), 1.0, out);
}

/// `out = a·b + beta·out` for a row-major m×n `out`, with `a` (m×k) and
/// `b` (k×n) given by (row, column) strides.
fn dgemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), beta: f64, out: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|x| *x = if beta == 0.0 { 0.0 } else { *x * beta });
        return;
    }
    if m == 1 && (sb.1 == 1 || sb.0 == 1) {
        // Single rows (streaming decode) skip the kernel's packing of `b`.
        let out = &mut out[..n];
        if beta == 0.0 {
            out.fill(0.0);
        } else if beta != 1.0 {
            out.iter_mut().for_each(|x| *x *= beta);
        }
        if sb.1 == 1 {
            for p in 0..k {
                axpy(a[p * sa.1], &b[p * sb.0..p * sb.0 + n], out);
            }
        } else {
            let x: Vec<f64> = (0..k).map(|p| a[p * sa.1]).collect();
            for (j, o) in out.iter_mut().enumerate() {
                *o += dot(&x, &b[j * sb.1..j * sb.1 + k]);
            }
        }
        return;
    }
    // SAFETY: the assertion above bounds every index the kernel touches,
    // and `out` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a[(i, p)] * b[(p, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(s[0], 0.5, epsilon = 1e-15);
        let s = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(s[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 1.0 / 3.0, epsilon = 1e-15);
        let s = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(&s[..], &[0.5, 0.5]);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn outer_examples() {
        let m = outer(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(m.as_slice(), &[3.0, 4.0, 6.0, 8.0]);
        let e1 = Vector::basis(3, 0);
        let m = outer(&e1, &[7.0, 9.0]).unwrap();
        assert_eq!(m.as_slice(), &[7.0, 9.0, 0.0, 0.0, 0.0, 0.0]);
        let m = outer(&[0.0, 0.0], &[1.5, -2.0, 3.0]).unwrap();
        assert!(m.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_identity_and_shift() {
        let mut rng = SeededRng::new(1);
        let b = Matrix::random_normal(3, 4, 1.0, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);

        let mut u = Matrix::zeros(3, 3);
        u[(0, 1)] = 1.0;
        u[(1, 2)] = 1.0;
        let rows = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let shifted = matmul(&u, &rows).unwrap();
        assert_eq!(shifted.as_slice(), &[3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let mut rng = SeededRng::new(7);
        let a = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let b = Matrix::random_normal(5, 3, 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-14);
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn transposed_kernels_agree() {
        let mut rng = SeededRng::new(3);
        let a = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let b = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let mut out = Matrix::zeros(5, 3);
        gemm_tn_acc(a.as_slice(), 4, 5, b.as_slice(), 3, out.as_mut_slice());
        assert!(out.max_abs_diff(&naive(&a.transpose(), &b)) < 1e-14);

        let c = Matrix::random_normal(6, 5, 1.0, &mut rng);
        let mut out = Matrix::zeros(4, 6);
        gemm_nt_acc(a.as_slice(), 4, 5, c.as_slice(), 6, out.as_mut_slice());
        assert!(out.max_abs_diff(&naive(&a, &c.transpose())) < 1e-14);
    }

    #[test]
    fn single_row_kernels_agree() {
        let mut rng = SeededRng::new(5);
        let x = Matrix::random_normal(1, 5, 1.0, &mut rng);
        let b = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let c = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let start = Matrix::random_normal(1, 3, 1.0, &mut rng);

        let mut out = Matrix::zeros(1, 3);
        out.as_mut_slice().fill(f64::NAN);
        gemm(x.as_slice(), 1, 5, b.as_slice(), 3, out.as_mut_slice());
        assert!(out.max_abs_diff(&naive(&x, &b)) < 1e-14);

        let plus_start = |mut m: Matrix| {
            m.add_scaled(&start, 1.0);
            m
        };
        let mut out = start.clone();
        gemm_acc(x.as_slice(), 1, 5, b.as_slice(), 3, out.as_mut_slice());
        assert!(out.max_abs_diff(&plus_start(naive(&x, &b))) < 1e-14);

        let mut out = start.clone();
        gemm_nt_acc(x.as_slice(), 1, 5, c.as_slice(), 3, out.as_mut_slice());
        assert!(out.max_abs_diff(&plus_start(naive(&x, &c.transpose()))) < 1e-14);

        let col = x.transpose();
        let mut out = start.clone();
        gemm_tn_acc(col.as_slice(), 5, 1, b.as_slice(), 3, out.as_mut_slice());
        assert!(out.max_abs_diff(&plus_start(naive(&x, &b))) < 1e-14);
    }

    #[test]
    fn associativity() {
        let mut rng = SeededRng::new(11);
        let a = Matrix::random_normal(8, 8, 1.0, &mut rng);
        let b = Matrix::random_normal(8, 8, 1.0, &mut rng);
        let c = Matrix::random_normal(8, 8, 1.0, &mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0] + x[1] * x[1], &[1.0, 2.0], 1e-6).unwrap();
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 4.0, epsilon = 1e-6);

        let g = finite_diff_grad(|x| softmax(x).unwrap().iter().sum(), &[0.3, -1.2, 4.0], 1e-6)
            .unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-8));

        assert!(finite_diff_grad(|x| x[0], &[1.0], 0.0).is_err());
        assert!(finite_diff_grad(|x| 1.0 / (x[0] - 1.0).abs().min(0.0), &[1.0], 1e-6).is_err());
    }

    #[test]
    fn rng_is_deterministic() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(43);
        assert_ne!(SeededRng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn from_vec_validates() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..16), c in -50.0f64..50.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(a.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn outer_equals_column_times_row(x in prop::collection::vec(-5.0f64..5.0, 1..6), y in prop::collection::vec(-5.0f64..5.0, 1..6)) {
            let o = outer(&x, &y).unwrap();
            let col = Matrix::from_vec(x.len(), 1, x.clone()).unwrap();
            let row = Matrix::from_vec(1, y.len(), y.clone()).unwrap();
            prop_assert!(o.max_abs_diff(&matmul(&col, &row).unwrap()) <= 1e-12);
        }
    }
}
