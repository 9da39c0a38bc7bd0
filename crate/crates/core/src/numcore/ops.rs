use super::counter::{flop_constants as fc, record_flops};
use super::gemm::{gemm, MatMut};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

fn ensure_2d<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok(())
}

/// `a · b` for `a: [n, k]`, `b: [k, m]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_2d("matmul", a)?;
    ensure_2d("matmul", b)?;
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
    gemm(T::one(), a.mat(), b.mat(), T::zero(), out.mat_mut());
    Ok(out)
}

/// Gradients of `y = a · b`: `(dy · bᵀ, aᵀ · dy)`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_2d("matmul_backward", dy)?;
    if a.cols() != b.rows() || dy.shape() != [a.rows(), b.cols()] {
        return Err(Error::shape("matmul_backward", a.shape(), b.shape()));
    }
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    gemm(T::one(), dy.mat(), b.mat().t(), T::zero(), da.mat_mut());
    gemm(T::one(), a.mat().t(), dy.mat(), T::zero(), db.mat_mut());
    Ok((da, db))
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    record_flops(fc::SOFTMAX_PER_ELEM * row.len() as u64);
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Given softmax output `y` and upstream `dy` (overwritten), computes
/// `dx = y ⊙ (dy − ⟨dy, y⟩)`.
pub(crate) fn softmax_backward_in_place<T: Real>(y: &[T], dy: &mut [T]) {
    let dot: T = y.iter().zip(dy.iter()).map(|(&a, &b)| a * b).sum();
    for (g, &p) in dy.iter_mut().zip(y) {
        *g = p * (*g - dot);
    }
}

/// Row-wise softmax of a 2-D tensor with per-row max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_2d("softmax_rows", x)?;
    let mut out = x.clone();
    let c = x.cols();
    if c > 0 {
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(Error::shape("softmax_rows_backward", y.shape(), dy.shape()));
    }
    let mut dx = dy.clone();
    let c = y.cols();
    if c > 0 {
        for (yr, gr) in y.data().chunks(c).zip(dx.data_mut().chunks_mut(c)) {
            softmax_backward_in_place(yr, gr);
        }
    }
    Ok(dx)
}

/// What the layer-norm backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    /// Per-row `1 / sqrt(var + eps)`.
    pub rstd: Vec<T>,
}

/// Row-wise layer norm over the flat `[rows, d]` buffer `x`, writing into `out`.
pub(crate) fn layer_norm_rows<T: Real>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    record_flops(fc::LAYER_NORM_PER_ELEM * x.len() as u64);
    let inv_d = T::one() / T::lit(d as f64);
    for (r, xr) in x.chunks(d).enumerate() {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let base = r * d;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[base + j] = h;
            out[base + j] = h * gamma[j] + beta[j];
        }
    }
}

/// Layer norm with the biased variance estimator.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    ensure_2d("layer_norm", x)?;
    let d = x.cols();
    if d < 2 {
        return Err(Error::config("layer_norm needs at least 2 features"));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut rstd = vec![T::zero(); x.rows()];
    layer_norm_rows(
        x.data(),
        d,
        gamma.data(),
        beta.data(),
        eps,
        out.data_mut(),
        xhat.data_mut(),
        &mut rstd,
    );
    Ok((out, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if cache.xhat.shape() != dy.shape() {
        return Err(Error::shape("layer_norm_backward", cache.xhat.shape(), dy.shape()));
    }
    let d = dy.cols();
    let g = gamma.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let inv_d = T::one() / T::lit(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    Ok((dx, dgamma, dbeta))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU of a scalar.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let u = c * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub(crate) fn gelu_slice<T: Real>(x: &[T], out: &mut [T]) {
    record_flops(fc::GELU_PER_ELEM * x.len() as u64);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = gelu_scalar(v);
    }
}

/// Overwrites `dy` with `dy ⊙ gelu'(x)`.
pub(crate) fn gelu_backward_slice<T: Real>(x: &[T], dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(x) {
        *g *= gelu_grad_scalar(v);
    }
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    gelu_slice(x.data(), out.data_mut());
    out
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("gelu_backward", x.shape(), dy.shape()));
    }
    let mut dx = dy.clone();
    gelu_backward_slice(x.data(), dx.data_mut());
    Ok(dx)
}

/// Adds `bias` to every row of the `[rows, bias.len()]` view.
pub(crate) fn add_bias_rows<T: Real>(out: &mut [T], bias: &[T]) {
    let d = bias.len();
    for row in out.chunks_mut(d) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Accumulates column sums of `dy` into `dbias`.
pub(crate) fn bias_grad_rows<T: Real>(dy: &[T], dbias: &mut [T]) {
    let d = dbias.len();
    for row in dy.chunks(d) {
        for (g, &v) in dbias.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// `out = x · w + b` for flat row-major buffers.
pub(crate) fn linear<T: Real>(
    x: &[T],
    rows: usize,
    w: &Tensor<T>,
    b: &Tensor<T>,
    out: &mut [T],
) {
    let (k, n) = (w.rows(), w.cols());
    gemm(
        T::one(),
        super::gemm::MatRef::new(x, rows, k),
        w.mat(),
        T::zero(),
        MatMut::new(out, rows, n),
    );
    add_bias_rows(out, b.data());
}
