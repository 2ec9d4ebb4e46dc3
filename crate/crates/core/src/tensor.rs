//! Dense row-major `f64` matrices and the handful of kernels the encoder needs.
//!
//! Everything here is a pure function of its inputs. The only state is a
//! thread-local multiply-add counter (see [`flops`]) used to tally work
//! analytically in benchmarks and tests.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "{:?}", &self.row(r)[..self.cols.min(6)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps `data` as a `rows x cols` matrix. Rejects wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length {
                op: "DenseMatrix::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("matrix entry {pos}"),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Length {
                op: "DenseMatrix::from_rows",
                expected: cols,
                got: bad.len(),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// A `1 x n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        DenseMatrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        DenseMatrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copy of columns `start..start + width`.
    pub fn col_block(&self, start: usize, width: usize) -> DenseMatrix {
        assert!(start + width <= self.cols, "column block out of range");
        let mut out = DenseMatrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `block` into columns `start..start + block.cols()`.
    pub fn set_col_block(&mut self, start: usize, block: &DenseMatrix) {
        assert_eq!(block.rows, self.rows, "row count mismatch");
        assert!(start + block.cols <= self.cols, "column block out of range");
        for r in 0..self.rows {
            let w = block.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
    }

    /// Adds `block` into columns `start..start + block.cols()`.
    pub fn add_col_block(&mut self, start: usize, block: &DenseMatrix) {
        assert_eq!(block.rows, self.rows, "row count mismatch");
        for r in 0..self.rows {
            let w = block.cols;
            for (d, s) in self.row_mut(r)[start..start + w].iter_mut().zip(block.row(r)) {
                *d += s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &DenseMatrix) {
        assert_eq!(bias.len(), self.cols, "broadcast length mismatch");
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
    }

    /// Column sums as a `1 x cols` row vector.
    pub fn column_sums(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Thread-local tally of floating-point operations performed by the dense
/// products in this module (two per multiply-add).
pub mod flops {
    use std::cell::Cell;

    thread_local! {
        static COUNT: Cell<u64> = const { Cell::new(0) };
    }

    #[inline]
    pub(crate) fn add(n: u64) {
        COUNT.with(|c| c.set(c.get() + n));
    }

    pub fn read() -> u64 {
        COUNT.with(Cell::get)
    }

    /// Runs `f` and returns its result together with the number of counted
    /// operations it performed on this thread.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let before = read();
        let out = f();
        (out, read() - before)
    }
}

/// `a x b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let o_row = &mut out.data[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    flops::add(2 * (m * k * n) as u64);
    Ok(out)
}

/// `aᵀ x b`.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    flops::add(2 * (m * k * n) as u64);
    Ok(out)
}

/// `a x bᵀ`.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = DenseMatrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            out.data[i * n + j] = dot(a_row, b.row(j));
        }
    }
    flops::add(2 * (m * k * n) as u64);
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// `log Σ exp(row)`, stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `(x − mean) / sqrt(var + eps) ⊙ gain + bias`, with population variance.
///
/// `eps` may be zero as long as `x` is not constant.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Length {
            op: "layer_norm",
            expected: x.len(),
            got: if gain.len() != x.len() { gain.len() } else { bias.len() },
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    let stats = NormStats::of(x, eps);
    if !stats.inv_std.is_finite() {
        return Err(Error::NonFinite {
            what: "layer_norm: zero variance with eps = 0".into(),
        });
    }
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - stats.mean) * stats.inv_std * g + b)
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormStats {
    pub mean: f64,
    pub inv_std: f64,
}

impl NormStats {
    pub fn of(x: &[f64], eps: f64) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        NormStats {
            mean,
            inv_std: 1.0 / (var + eps).sqrt(),
        }
    }
}

// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU, elementwise.
pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().copied().map(gelu_scalar).collect()
}

/// Central-difference gradient of `f` at `p`:
/// `(f(p + eps e_i) − f(p − eps e_i)) / 2 eps` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!(
            "finite difference step must lie in [1e-6, 1e-2], got {eps}"
        )));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: format!("objective at coordinate {i}"),
            });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// 64-bit FNV-1a, used to derive per-tensor RNG streams from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// ChaCha8 generator seeded with `seed`, on the stream selected by hashing
/// `stream`. Identical `(seed, stream)` pairs give identical sequences on
/// every platform.
pub fn derived_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(stream.as_bytes()));
    rng
}

/// Fisher-Yates shuffle driven by `rng`.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for p in 0..a.cols() {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out[i * b.cols() + j] = acc;
            }
        }
        DenseMatrix::from_vec(a.rows(), b.cols(), out).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &DenseMatrix::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![2.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let err = matmul(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn matmul_random_matches_naive() {
        let mut rng = derived_rng(11, "matmul");
        let a = DenseMatrix::random_normal(7, 5, 1.0, &mut rng);
        let b = DenseMatrix::random_normal(5, 3, 1.0, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        assert!(tn.max_abs_diff(&fast) <= 1e-12);
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&fast) <= 1e-12);
    }

    #[test]
    fn matmul_counts_flops() {
        let (_, n) = flops::measure(|| {
            matmul(&DenseMatrix::zeros(3, 4), &DenseMatrix::zeros(4, 5)).unwrap()
        });
        assert_eq!(n, 2 * 3 * 4 * 5);
    }

    #[test]
    fn softmax_examples() {
        let s =softmax_rows(&DenseMatrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&DenseMatrix::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap());
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax_rows(&DenseMatrix::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        let y = layer_norm(&[0.0, 2.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y, vec![-1.0, 1.0]);
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(layer_norm(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let x = [0.3, -1.7, 2.2, 0.9, -0.4];
        let g = [1.5, 0.5, -1.0, 2.0, 1.0];
        let b = [0.1, 0.0, -0.2, 0.3, 1.0];
        let eps = 1e-5;
        let n = x.len() as f64;
        let mut mean = 0.0;
        for v in x {
            mean += v / n;
        }
        let mut var = 0.0;
        for v in x {
            var += (v - mean).powi(2) / n;
        }
        let y = layer_norm(&x, &g, &b, eps).unwrap();
        for i in 0..x.len() {
            let expect = (x[i] - mean) / (var + eps).sqrt() * g[i] + b[i];
            assert!((y[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(&[0.0]), vec![0.0]);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-9);
        assert!(gelu_scalar(-10.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = finite_diff_grad(|p| gelu_scalar(p[0]), &[x], 1e-5).unwrap();
            assert!((fd[0] - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn finite_diff_rejects_non_finite_and_bad_eps() {
        let err = finite_diff_grad(|p| if p[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
        assert!(finite_diff_grad(|_| 0.0, &[0.0], 0.5).is_err());
    }

    #[test]
    fn derived_rng_is_reproducible_and_stream_separated() {
        let a: Vec<u64> = (0..4).map(|_| derived_rng(7, "x").random()).collect();
        let mut r1 = derived_rng(7, "x");
        let mut r2 = derived_rng(7, "y");
        let s1: Vec<u64> = (0..4).map(|_| r1.random()).collect();
        let s2: Vec<u64> = (0..4).map(|_| r2.random()).collect();
        assert_eq!(a[0], s1[0]);
        assert_ne!(s1, s2);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let m = DenseMatrix::row_vector(&row);
            let s = softmax_rows(&m);
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn matmul_agrees_with_naive(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6) {
            let mut rng = derived_rng(seed, "prop");
            let a = DenseMatrix::random_normal(m, k, 1.0, &mut rng);
            let b = DenseMatrix::random_normal(k, n, 1.0, &mut rng);
            prop_assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
            prop_assert_eq!(matmul(&DenseMatrix::identity(m), &a).unwrap(), a);
        }
    }
}
