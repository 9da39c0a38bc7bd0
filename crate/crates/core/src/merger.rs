//! The PatchMerger: a learned `D x M` score matrix that softly routes any
//! number of input tokens into exactly `M` output tokens.
//!
//! For layer-normalized tokens `Z` (`N x D`) the scores are `S = Z W`
//! (`N x M`). The softmax runs across each input token's `M` scores, so every
//! input distributes unit mass over the outputs, and the merged tokens are
//! `Y = softmax(S)ᵀ Z` (`M x D`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    gemm, layer_norm, layer_norm_backward, softmax_backward_in_place, softmax_in_place,
    LayerNormCache, MatMut, MatRef, Real, Tensor, LN_EPS,
};
use crate::vit::{LayerNormParams, ParamVisitor};

/// Where the merger sits and how many tokens it emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergerConfig {
    /// Number of encoder blocks that run before merging.
    pub placement: usize,
    /// Output token count `M`.
    pub output_tokens: usize,
    /// Route the cls token around the merger instead of merging it.
    #[serde(default = "default_true")]
    pub preserve_cls: bool,
}

fn default_true() -> bool {
    true
}

impl MergerConfig {
    pub fn new(placement: usize, output_tokens: usize) -> Self {
        Self {
            placement,
            output_tokens,
            preserve_cls: true,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.placement < 1 || self.placement > depth {
            return Err(Error::config(format!(
                "merger placement {} outside 1..={depth}",
                self.placement
            )));
        }
        if self.output_tokens < 1 {
            return Err(Error::config("merger needs at least one output token"));
        }
        Ok(())
    }
}

/// Learned merger weights plus the merger's own pre-merge layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct MergerParams<T> {
    /// `D x M` score matrix.
    pub w: Tensor<T>,
    pub ln: LayerNormParams<T>,
}

impl<T: Real> MergerParams<T> {
    pub fn init(dim: usize, output_tokens: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::trunc_normal(&[dim, output_tokens], 0.02, rng),
            ln: LayerNormParams::new(dim),
        }
    }

    pub fn zeros(dim: usize, output_tokens: usize) -> Self {
        Self {
            w: Tensor::zeros(&[dim, output_tokens]),
            ln: LayerNormParams::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_tokens(&self) -> usize {
        self.w.cols()
    }
}

impl<T: Real> ParamVisitor<T> for MergerParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}W"), &self.w);
        f(format!("{prefix}ln_gamma"), &self.ln.gamma);
        f(format!("{prefix}ln_beta"), &self.ln.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}W"), &mut self.w);
        f(format!("{prefix}ln_gamma"), &mut self.ln.gamma);
        f(format!("{prefix}ln_beta"), &mut self.ln.beta);
    }
}

/// Per-token routing weights `softmax(Z W)` (`N x M`) for already-normalized `z`.
pub fn routing_weights<T: Real>(z: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape().len() != 2 || z.cols() != w.rows() {
        return Err(Error::shape("routing_weights", z.shape(), w.shape()));
    }
    let m = w.cols();
    let mut a = Tensor::zeros(&[z.rows(), m]);
    gemm(T::one(), z.mat(), w.mat(), T::zero(), a.mat_mut());
    for row in a.data_mut().chunks_mut(m) {
        softmax_in_place(row);
    }
    Ok(a)
}

/// `softmax(Z W)ᵀ Z` on already-normalized tokens (no layer norm).
pub fn merge_normalized<T: Real>(z: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let a = routing_weights(z, w)?;
    let mut y = Tensor::zeros(&[w.cols(), z.cols()]);
    gemm(T::one(), a.mat().t(), z.mat(), T::zero(), y.mat_mut());
    Ok(y)
}

/// Routing weights for raw tokens, after the merger's layer norm.
pub fn merge_weights<T: Real>(x: &Tensor<T>, params: &MergerParams<T>) -> Result<Tensor<T>> {
    let (z, _) = layer_norm(x, &params.ln.gamma, &params.ln.beta, T::lit(LN_EPS))?;
    routing_weights(&z, &params.w)
}

/// Merges `N x D` raw tokens into `M x D`. Layer norm is applied inside.
pub fn merge<T: Real>(x: &Tensor<T>, params: &MergerParams<T>) -> Result<Tensor<T>> {
    let (y, _) = merge_batch(x, 1, x.rows(), params, false)?;
    Ok(y)
}

/// Merges `(N + 1) x D` tokens whose row 0 is the cls token into `(M + 1) x D`;
/// the cls row is passed through unchanged.
pub fn merge_with_cls<T: Real>(x: &Tensor<T>, params: &MergerParams<T>) -> Result<Tensor<T>> {
    let (y, _) = merge_batch(x, 1, x.rows(), params, true)?;
    Ok(y)
}

/// Gradients of [`merge`] for upstream `dy` (`M x D`).
pub fn merge_backward<T: Real>(
    x: &Tensor<T>,
    params: &MergerParams<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, MergerParams<T>)> {
    let (_, cache) = merge_batch(x, 1, x.rows(), params, false)?;
    let mut grads = MergerParams::zeros(params.dim(), params.output_tokens());
    let dx = merge_batch_backward(&cache, params, dy, &mut grads)?;
    Ok((dx, grads))
}

/// Forward state kept for [`merge_batch_backward`].
#[derive(Debug, Clone)]
pub struct MergeCache<T> {
    batch: usize,
    tokens_in: usize,
    cls: bool,
    ln: LayerNormCache<T>,
    /// Normalized mergeable tokens, `[batch * n, D]`.
    z: Tensor<T>,
    /// Routing weights, `[batch * n, M]`.
    weights: Tensor<T>,
}

impl<T> MergeCache<T> {
    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }
}

/// Batched merge over `[batch * tokens, D]`. With `cls`, row 0 of every sample
/// bypasses the merger and leads the sample's `M + 1` output rows.
pub fn merge_batch<T: Real>(
    x: &Tensor<T>,
    batch: usize,
    tokens: usize,
    params: &MergerParams<T>,
    cls: bool,
) -> Result<(Tensor<T>, MergeCache<T>)> {
    let d = params.dim();
    let m = params.output_tokens();
    if x.shape().len() != 2 || x.cols() != d || x.rows() != batch * tokens {
        return Err(Error::shape("merge", x.shape(), &[batch * tokens, d]));
    }
    let lead = usize::from(cls);
    if tokens <= lead {
        return Err(Error::config("merger needs at least one mergeable token"));
    }
    let n = tokens - lead;
    let spatial = if cls {
        let rows: Vec<usize> = (0..batch)
            .flat_map(|b| (b * tokens + 1)..((b + 1) * tokens))
            .collect();
        x.select_rows(&rows)
    } else {
        x.clone()
    };
    let (z, ln) = layer_norm(&spatial, &params.ln.gamma, &params.ln.beta, T::lit(LN_EPS))?;
    let weights = routing_weights(&z, &params.w)?;

    let out_tokens = m + lead;
    let mut y = Tensor::zeros(&[batch * out_tokens, d]);
    for b in 0..batch {
        if cls {
            y.row_mut(b * out_tokens).copy_from_slice(x.row(b * tokens));
        }
        let a_b = weights.mat().block(b * n, n, 0, m);
        let z_b = z.mat().block(b * n, n, 0, d);
        let y_b = MatMut::strided(y.data_mut(), (b * out_tokens + lead) * d, m, d, d, 1);
        gemm(T::one(), a_b.t(), z_b, T::zero(), y_b);
    }
    Ok((
        y,
        MergeCache {
            batch,
            tokens_in: tokens,
            cls,
            ln,
            z,
            weights,
        },
    ))
}

/// Backward of [`merge_batch`]: accumulates into `grads` and returns `dx`.
pub fn merge_batch_backward<T: Real>(
    cache: &MergeCache<T>,
    params: &MergerParams<T>,
    dy: &Tensor<T>,
    grads: &mut MergerParams<T>,
) -> Result<Tensor<T>> {
    let d = params.dim();
    let m = params.output_tokens();
    let lead = usize::from(cache.cls);
    let out_tokens = m + lead;
    let batch = cache.batch;
    if dy.shape() != [batch * out_tokens, d] {
        return Err(Error::shape("merge_backward", dy.shape(), &[batch * out_tokens, d]));
    }
    let n = cache.tokens_in - lead;
    let a = &cache.weights;
    let z = &cache.z;

    // dZ = A dY (value path); dA = Z dYᵀ (routing path).
    let mut dz = Tensor::zeros(&[batch * n, d]);
    let mut da = Tensor::zeros(&[batch * n, m]);
    for b in 0..batch {
        let dy_b = MatRef::strided(dy.data(), (b * out_tokens + lead) * d, m, d, d, 1);
        let a_b = a.mat().block(b * n, n, 0, m);
        let z_b = z.mat().block(b * n, n, 0, d);
        let dz_b = MatMut::strided(dz.data_mut(), b * n * d, n, d, d, 1);
        gemm(T::one(), a_b, dy_b, T::zero(), dz_b);
        let da_b = MatMut::strided(da.data_mut(), b * n * m, n, m, m, 1);
        gemm(T::one(), z_b, dy_b.t(), T::zero(), da_b);
    }
    // Softmax backward per input token turns dA into dS.
    for (ar, gr) in a.data().chunks(m).zip(da.data_mut().chunks_mut(m)) {
        softmax_backward_in_place(ar, gr);
    }
    let ds = da;
    gemm(T::one(), z.mat().t(), ds.mat(), T::one(), grads.w.mat_mut());
    gemm(T::one(), ds.mat(), params.w.mat().t(), T::one(), dz.mat_mut());

    let (dspatial, dgamma, dbeta) = layer_norm_backward(&cache.ln, &params.ln.gamma, &dz)?;
    grads.ln.gamma.add_assign(&dgamma)?;
    grads.ln.beta.add_assign(&dbeta)?;

    if !cache.cls {
        return Ok(dspatial);
    }
    let tokens = cache.tokens_in;
    let mut dx = Tensor::zeros(&[batch * tokens, d]);
    for b in 0..batch {
        dx.row_mut(b * tokens).copy_from_slice(dy.row(b * out_tokens));
        for p in 0..n {
            dx.row_mut(b * tokens + 1 + p)
                .copy_from_slice(dspatial.row(b * n + p));
        }
    }
    Ok(dx)
}
