use super::params::AttentionParams;
use crate::error::{Error, Result};
use crate::numcore::{
    bias_grad_rows, flop_constants, gemm, linear, record_flops, softmax_backward_in_place,
    softmax_in_place, MatMut, MatRef, Real, Tensor,
};

/// Forward state for [`attention_backward_batch`].
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    batch: usize,
    tokens: usize,
    input: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention weights, `[batch, heads, tokens, tokens]` flattened.
    probs: Vec<T>,
    /// Concatenated per-head outputs before the output projection.
    context: Tensor<T>,
}

impl<T: Real> AttentionCache<T> {
    /// Weights of head `h` for sample `b`, `tokens x tokens`.
    pub fn weights(&self, b: usize, h: usize, heads: usize) -> Tensor<T> {
        let t = self.tokens;
        let start = (b * heads + h) * t * t;
        Tensor::new(vec![t, t], self.probs[start..start + t * t].to_vec())
            .expect("cached weights have a square shape")
    }
}

fn project<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(&[x.rows(), w.cols()]);
    linear(x.data(), x.rows(), w, b, out.data_mut());
    out
}

/// Multi-head scaled dot-product self-attention for a single `N x D` sequence.
pub fn attention<T: Real>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    let (y, _) = attention_batch(x, 1, x.rows(), params)?;
    Ok(y)
}

/// Self-attention over `batch` sequences of `tokens` rows stacked in `x`.
pub fn attention_batch<T: Real>(
    x: &Tensor<T>,
    batch: usize,
    tokens: usize,
    p: &AttentionParams<T>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let d = p.dim();
    if x.shape().len() != 2 || x.cols() != d || x.rows() != batch * tokens || tokens == 0 {
        return Err(Error::shape("attention", x.shape(), &[batch * tokens, d]));
    }
    let heads = p.num_heads;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let q = project(x, &p.wq, &p.bq);
    let k = project(x, &p.wk, &p.bk);
    let v = project(x, &p.wv, &p.bv);
    let t = tokens;
    let mut probs = vec![T::zero(); batch * heads * t * t];
    let mut context = Tensor::zeros(&[batch * t, d]);
    for b in 0..batch {
        for h in 0..heads {
            let qh = q.mat().block(b * t, t, h * dh, dh);
            let kh = k.mat().block(b * t, t, h * dh, dh);
            let vh = v.mat().block(b * t, t, h * dh, dh);
            let start = (b * heads + h) * t * t;
            let scores = &mut probs[start..start + t * t];
            gemm(scale, qh, kh.t(), T::zero(), MatMut::new(scores, t, t));
            record_flops(flop_constants::ATTN_SCALE_PER_ELEM * (t * t) as u64);
            for row in scores.chunks_mut(t) {
                softmax_in_place(row);
            }
            let ctx = MatMut::strided(context.data_mut(), b * t * d + h * dh, t, dh, d, 1);
            gemm(T::one(), MatRef::new(&probs[start..start + t * t], t, t), vh, T::zero(), ctx);
        }
    }
    let out = project(&context, &p.wo, &p.bo);
    Ok((
        out,
        AttentionCache {
            batch,
            tokens,
            input: x.clone(),
            q,
            k,
            v,
            probs,
            context,
        },
    ))
}

/// Backward of [`attention_batch`]: accumulates parameter gradients into
/// `grads` and returns the gradient w.r.t. the input.
pub fn attention_backward_batch<T: Real>(
    cache: &AttentionCache<T>,
    p: &AttentionParams<T>,
    dout: &Tensor<T>,
    grads: &mut AttentionParams<T>,
) -> Result<Tensor<T>> {
    let d = p.dim();
    let (batch, t) = (cache.batch, cache.tokens);
    if dout.shape() != [batch * t, d] {
        return Err(Error::shape("attention_backward", dout.shape(), &[batch * t, d]));
    }
    let heads = p.num_heads;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    gemm(T::one(), cache.context.mat().t(), dout.mat(), T::one(), grads.wo.mat_mut());
    bias_grad_rows(dout.data(), grads.bo.data_mut());
    let mut dctx = Tensor::zeros(&[batch * t, d]);
    gemm(T::one(), dout.mat(), p.wo.mat().t(), T::zero(), dctx.mat_mut());

    let mut dq = Tensor::zeros(&[batch * t, d]);
    let mut dk = Tensor::zeros(&[batch * t, d]);
    let mut dv = Tensor::zeros(&[batch * t, d]);
    let mut dscores = vec![T::zero(); t * t];
    for b in 0..batch {
        for h in 0..heads {
            let start = (b * heads + h) * t * t;
            let probs = MatRef::new(&cache.probs[start..start + t * t], t, t);
            let dctx_h = dctx.mat().block(b * t, t, h * dh, dh);
            let qh = cache.q.mat().block(b * t, t, h * dh, dh);
            let kh = cache.k.mat().block(b * t, t, h * dh, dh);
            let vh = cache.v.mat().block(b * t, t, h * dh, dh);
            let block_off = b * t * d + h * dh;

            gemm(T::one(), probs.t(), dctx_h, T::zero(), MatMut::strided(dv.data_mut(), block_off, t, dh, d, 1));
            gemm(T::one(), dctx_h, vh.t(), T::zero(), MatMut::new(&mut dscores, t, t));
            for (pr, gr) in cache.probs[start..start + t * t]
                .chunks(t)
                .zip(dscores.chunks_mut(t))
            {
                softmax_backward_in_place(pr, gr);
            }
            let ds = MatRef::new(&dscores, t, t);
            gemm(scale, ds, kh, T::zero(), MatMut::strided(dq.data_mut(), block_off, t, dh, d, 1));
            gemm(scale, ds.t(), qh, T::zero(), MatMut::strided(dk.data_mut(), block_off, t, dh, d, 1));
        }
    }

    let x = &cache.input;
    let mut dx = Tensor::zeros(&[batch * t, d]);
    for (dproj, w, gw, gb) in [
        (&dq, &p.wq, &mut grads.wq, &mut grads.bq),
        (&dk, &p.wk, &mut grads.wk, &mut grads.bk),
        (&dv, &p.wv, &mut grads.wv, &mut grads.bv),
    ] {
        gemm(T::one(), x.mat().t(), dproj.mat(), T::one(), gw.mat_mut());
        bias_grad_rows(dproj.data(), gb.data_mut());
        gemm(T::one(), dproj.mat(), w.mat().t(), T::one(), dx.mat_mut());
    }
    Ok(dx)
}
