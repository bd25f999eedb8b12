//! Forward kernels. Every public function validates shapes and refuses to
//! return non-finite values; the `*_slice` helpers are the unchecked
//! building blocks shared with the tape and the decode path.

use super::{Element, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Row-major GEMM on slices: `c (m x n) = op(a) * op(b) (+ c if accumulate)`.
///
/// `a` is stored `m x k` (or `k x m` when `ta`), `b` is stored `k x n`
/// (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every access made by the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] = acc[l] + a[i + l] * b[i + l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * 8..n {
        s = s + a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Standard 2-D matrix product.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err(
            "matmul",
            format!("expected 2-D operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner extents differ: [{m}x{k}] x [{k2}x{n}]"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new([m, n], out)?.ensure_finite("matmul")
}

/// Applies a `[K, P]` weight to the last axis of `x` (`[..., K] -> [..., P]`).
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.last_dim() != w.shape()[0] {
        return Err(shape_err(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let m = x.rows();
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, x.data(), false, w.data(), false, &mut out, false);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)?.ensure_finite("linear")
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_slice<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// In-place log-softmax of one row; returns the log-partition.
pub fn log_softmax_slice<T: Element>(row: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
    lse
}

fn check_last_axis<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    if x.rank() == 0 || x.last_dim() == 0 {
        return Err(shape_err(op, format!("empty last axis in {:?}", x.shape())));
    }
    Ok(())
}

/// Softmax over the last axis.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_last_axis("softmax", x)?;
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        softmax_slice(row);
    }
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("softmax")
}

/// Log-softmax over the last axis.
pub fn log_softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_last_axis("log_softmax", x)?;
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        log_softmax_slice(row);
    }
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("log_softmax")
}

/// Writes `x / sqrt(mean(x^2) + eps) * gain` into `out`; returns the
/// reciprocal RMS.
#[inline]
pub fn rmsnorm_slice<T: Element>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let ms = dot(x, x) / T::from_usize(x.len());
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

pub fn rmsnorm<T: Element>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(invalid("rmsnorm eps must be positive"));
    }
    let d = x.last_dim();
    if gain.numel() != d {
        return Err(shape_err(
            "rmsnorm",
            format!("gain has {} entries, last axis is {d}", gain.numel()),
        ));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        rmsnorm_slice(xr, gain.data(), eps, or);
    }
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("rmsnorm")
}

#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` as `max(x, 0) + ln1p(e^-|x|)`, exact in both tails.
#[inline]
pub fn softplus_scalar<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn silu_scalar<T: Element>(x: T) -> T {
    x * sigmoid_scalar(x)
}

pub fn softplus<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(softplus_scalar).ensure_finite("softplus")
}

pub fn silu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(silu_scalar).ensure_finite("silu")
}

pub fn exp<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| v.exp()).ensure_finite("exp")
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)?.ensure_finite("add")
}
