//! Minimal dense-tensor machinery: scalar abstraction, GEMM, parameter
//! traversal and the Adam optimizer.
//!
//! Layers keep explicit forward caches and implement their own backward
//! passes. Gradients are accumulated into a value of the same type as the
//! module (`zeros_like`), so parameter and gradient traversal share one
//! `visit` implementation.

pub mod gradcheck;
pub mod layers;
pub mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::mmgf::{DType, RawTensor, TensorData};
use crate::error::{Error, Result};

pub trait Scalar:
    Float
    + FromPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const DTYPE: DType;

    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }

    fn to_tensor_data(data: &[Self]) -> TensorData;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn to_tensor_data(data: &[f32]) -> TensorData {
        TensorData::F32(data.to_vec())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn to_tensor_data(data: &[f64]) -> TensorData {
        TensorData::F64(data.to_vec())
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on contiguous row-major buffers.
///
/// `op(A)` is `m x k`; with `ta` the buffer holds `A` as `k x m`. Same for
/// `B` (`k x n`, or `n x k` with `tb`). `C` is `m x n`. With `beta == 0` the
/// previous contents of `C` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "lhs buffer too small");
    assert!(b.len() >= k * n, "rhs buffer too small");
    assert!(c.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense tensor with row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform init in `[-bound, bound]`; values are drawn in f64 so that
    /// f32 and f64 models built from one seed agree up to rounding.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn to_raw(&self) -> RawTensor {
        RawTensor {
            dims: self.shape.clone(),
            data: T::to_tensor_data(&self.data),
        }
    }

    pub fn from_raw(raw: &RawTensor) -> Self {
        Tensor {
            shape: raw.dims.clone(),
            data: raw.data.to_f64().into_iter().map(T::of).collect(),
        }
    }
}

/// `[rows, cols]` matrix; feature sequences are `[channels, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix payload length");
        Mat { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&x| T::of(x)).collect())
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Mat<T> {
        let mut out = Mat::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Mat<T> {
        assert!(start + len <= self.rows, "row slice out of range");
        Mat::from_vec(len, self.cols, self.data[start * self.cols..(start + len) * self.cols].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Named parameter traversal shared by models and their gradients.
pub trait Module<T: Scalar>: Clone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.visit_mut("", &mut |_, t| t.fill_zero());
        g
    }

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Adds `scale * other` parameter-wise. Panics on structure mismatch.
    fn axpy(&mut self, scale: T, other: &Self) {
        let mut src = Vec::new();
        other.visit("", &mut |_, t| src.push(t.data.clone()));
        let mut i = 0;
        self.visit_mut("", &mut |_, t| {
            for (a, &b) in t.data.iter_mut().zip(&src[i]) {
                *a += scale * b;
            }
            i += 1;
        });
    }

    /// Replaces parameter values from `(name, tensor)` pairs, checking shapes.
    fn load_named(&mut self, params: &[(String, RawTensor)]) -> Result<()> {
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match params.iter().find(|(n, _)| *n == name) {
                None => err = Some(Error::format("checkpoint", format!("missing tensor `{name}`"))),
                Some((_, raw)) if raw.dims != t.shape => {
                    err = Some(Error::shape(
                        format!("{name} {:?}", t.shape),
                        format!("{:?}", raw.dims),
                    ))
                }
                Some((_, raw)) => *t = Tensor::from_raw(raw),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// SHA-256 over parameter names, shapes and little-endian payloads.
pub fn hash_module<T: Scalar, M: Module<T>>(m: &M) -> String {
    let mut h = Sha256::new();
    m.visit("", &mut |name, t| {
        h.update(name.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for x in &t.data {
            h.update(x.f64().to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Column-wise softmax of a `[classes, frames]` matrix.
pub fn softmax_cols<T: Scalar>(logits: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(logits.rows, logits.cols);
    for t in 0..logits.cols {
        let mut mx = T::neg_infinity();
        for c in 0..logits.rows {
            mx = mx.max(logits.at(c, t));
        }
        let mut sum = T::zero();
        for c in 0..logits.rows {
            let e = (logits.at(c, t) - mx).exp();
            *out.at_mut(c, t) = e;
            sum += e;
        }
        for c in 0..logits.rows {
            *out.at_mut(c, t) = out.at(c, t) / sum;
        }
    }
    out
}

/// Column-wise log-softmax, computed as `z - logsumexp(z)`.
pub fn log_softmax_cols<T: Scalar>(logits: &Mat<T>) -> Mat<T> {
    let mut out = logits.clone();
    for t in 0..logits.cols {
        let mut mx = T::neg_infinity();
        for c in 0..logits.rows {
            mx = mx.max(logits.at(c, t));
        }
        let mut sum = T::zero();
        for c in 0..logits.rows {
            sum += (logits.at(c, t) - mx).exp();
        }
        let lse = mx + sum.ln();
        for c in 0..logits.rows {
            *out.at_mut(c, t) = logits.at(c, t) - lse;
        }
    }
    out
}

/// Maps a gradient w.r.t. log-probabilities to one w.r.t. the logits:
/// `dz = g - softmax(z) * sum(g)` per column.
pub fn log_softmax_backward<T: Scalar>(logp: &Mat<T>, dlogp: &Mat<T>) -> Mat<T> {
    let mut dz = dlogp.clone();
    for t in 0..logp.cols {
        let mut s = T::zero();
        for c in 0..logp.rows {
            s += dlogp.at(c, t);
        }
        for c in 0..logp.rows {
            *dz.at_mut(c, t) = dlogp.at(c, t) - logp.at(c, t).exp() * s;
        }
    }
    dz
}
