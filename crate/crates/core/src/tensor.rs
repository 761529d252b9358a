//! Dense row-major matrices and the layer primitives built on them.
//!
//! Every primitive that participates in training has a forward function that
//! returns whatever its backward pass needs, and a matching backward function
//! that maps an upstream gradient to input (and parameter) gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1×n matrix holding `v`.
    pub fn row_vector(v: &[T]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Uniform samples from `[-scale, scale)`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| lit(rng.gen_range(-scale..scale)))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    /// Adds `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &[T]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, &b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    /// Sum over rows, giving one value per column.
    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for row in self.iter_rows() {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn row_mean(&self) -> Vec<T> {
        let mut out = self.column_sums();
        let n = T::from_usize(self.rows).unwrap();
        out.iter_mut().for_each(|x| *x /= n);
        out
    }

    /// Column block `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Writes `block` into columns `[start, start + block.cols)`.
    pub fn set_column_block(&mut self, start: usize, block: &Self) {
        for i in 0..self.rows {
            let w = block.cols;
            self.row_mut(i)[start..start + w].copy_from_slice(block.row(i));
        }
    }

    /// Row permutation: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Converts element type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// `a · b`
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut out);
    out
}

/// `out += a · b`
pub fn matmul_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    assert_eq!((out.rows, out.cols), (a.rows, b.cols), "matmul output shape");
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
}

/// `a · bᵀ`
pub fn matmul_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows, b.rows);
    matmul_bt_acc(a, b, &mut out);
    out
}

/// `out += a · bᵀ`
pub fn matmul_bt_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    assert_eq!((out.rows, out.cols), (a.rows, b.rows), "matmul_bt output shape");
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] += dot(ar, b.row(j));
        }
    }
}

/// `out += aᵀ · b`
pub fn matmul_at_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    assert_eq!((out.rows, out.cols), (a.cols, b.cols), "matmul_at output shape");
    let n = b.cols;
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == T::zero() {
                continue;
            }
            for (o, &x) in out.data[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += ari * x;
            }
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// In-place numerically stable softmax of one vector.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Gradient through a softmax given its output `p` and the upstream gradient.
pub fn softmax_backward<T: Scalar>(p: &[T], grad_out: &[T]) -> Vec<T> {
    let inner = dot(p, grad_out);
    p.iter()
        .zip(grad_out)
        .map(|(&pi, &gi)| pi * (gi - inner))
        .collect()
}

pub fn softmax_rows_backward<T: Scalar>(p: &Matrix<T>, grad_out: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(p.rows, p.cols);
    for i in 0..p.rows {
        let g = softmax_backward(p.row(i), grad_out.row(i));
        out.row_mut(i).copy_from_slice(&g);
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved state of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    /// Standardized rows before gain and bias.
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

/// Per-row standardization (population variance, `eps` inside the root),
/// followed by an affine map with `gain` and `bias`.
pub fn layer_norm<T: Scalar>(m: &Matrix<T>, gain: &[T], bias: &[T], eps: f64) -> Matrix<T> {
    layer_norm_forward(m, gain, bias, eps).0
}

pub fn layer_norm_forward<T: Scalar>(
    m: &Matrix<T>,
    gain: &[T],
    bias: &[T],
    eps: f64,
) -> (Matrix<T>, LayerNormCache<T>) {
    assert_eq!(gain.len(), m.cols, "layer_norm gain length");
    assert_eq!(bias.len(), m.cols, "layer_norm bias length");
    let n = T::from_usize(m.cols).unwrap();
    let eps = lit::<T>(eps);
    let mut normalized = Matrix::zeros(m.rows, m.cols);
    let mut out = Matrix::zeros(m.rows, m.cols);
    let mut inv_std = Vec::with_capacity(m.rows);
    for i in 0..m.rows {
        let row = m.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..m.cols {
            let y = (row[j] - mean) * inv;
            normalized[(i, j)] = y;
            out[(i, j)] = y * gain[j] + bias[j];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns (input grad, gain grad, bias grad).
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &[T],
    grad_out: &Matrix<T>,
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let (rows, cols) = grad_out.shape();
    let n = T::from_usize(cols).unwrap();
    let mut grad_in = Matrix::zeros(rows, cols);
    let mut grad_gain = vec![T::zero(); cols];
    let mut grad_bias = vec![T::zero(); cols];
    let mut scaled = vec![T::zero(); cols];
    for i in 0..rows {
        let y = cache.normalized.row(i);
        let g = grad_out.row(i);
        for j in 0..cols {
            grad_gain[j] += g[j] * y[j];
            grad_bias[j] += g[j];
            scaled[j] = g[j] * gain[j];
        }
        let mean_g = scaled.iter().copied().sum::<T>() / n;
        let mean_gy = dot(&scaled, y) / n;
        let inv = cache.inv_std[i];
        for (j, out) in grad_in.row_mut(i).iter_mut().enumerate() {
            *out = inv * (scaled[j] - mean_g - y[j] * mean_gy);
        }
    }
    (grad_in, grad_gain, grad_bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and the multiplicative mask that was
/// applied (`None` when the layer is an identity).
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    m: &Matrix<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> (Matrix<T>, Option<Matrix<T>>) {
    assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
    if mode == Mode::Eval || p == 0.0 {
        return (m.clone(), None);
    }
    let keep = lit::<T>(1.0 / (1.0 - p));
    let mask_data: Vec<T> = (0..m.len())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let mask = Matrix::from_vec(m.rows, m.cols, mask_data).unwrap();
    let mut out = m.clone();
    for (o, &k) in out.data.iter_mut().zip(&mask.data) {
        *o *= k;
    }
    (out, Some(mask))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&Matrix<T>>, grad_out: Matrix<T>) -> Matrix<T> {
    match mask {
        None => grad_out,
        Some(mask) => {
            let mut g = grad_out;
            for (o, &k) in g.data.iter_mut().zip(&mask.data) {
                *o *= k;
            }
            g
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-ln σ(x)` evaluated without overflow.
#[inline]
pub fn neg_log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}
