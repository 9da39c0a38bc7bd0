use super::attention::{attention_backward_batch, attention_batch, AttentionCache};
use super::params::EncoderBlockParams;
use crate::error::{Error, Result};
use crate::numcore::{
    bias_grad_rows, gelu_backward_slice, gelu_slice, gemm, layer_norm, layer_norm_backward,
    linear, LayerNormCache, Real, Tensor, LN_EPS,
};

/// Forward state of one encoder block.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    ln2_out: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden_act: Tensor<T>,
}

impl<T> BlockCache<T> {
    pub fn attention(&self) -> &AttentionCache<T> {
        &self.attn
    }
}

/// `x + Att(LN(x))`, then `+ MLP(LN(·))`, for one `N x D` sequence.
pub fn encoder_block<T: Real>(x: &Tensor<T>, p: &EncoderBlockParams<T>) -> Result<Tensor<T>> {
    let (y, _) = encoder_block_batch(x, 1, x.rows(), p)?;
    Ok(y)
}

/// Pre-norm residual block over `batch` stacked sequences of `tokens` rows.
pub fn encoder_block_batch<T: Real>(
    x: &Tensor<T>,
    batch: usize,
    tokens: usize,
    p: &EncoderBlockParams<T>,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let eps = T::lit(LN_EPS);
    let (ln1_out, ln1) = layer_norm(x, &p.ln1.gamma, &p.ln1.beta, eps)?;
    let (mut attn_out, attn) = attention_batch(&ln1_out, batch, tokens, &p.attn)?;
    attn_out.add_assign(x)?;
    let mid = attn_out;
    let (ln2_out, ln2) = layer_norm(&mid, &p.ln2.gamma, &p.ln2.beta, eps)?;
    let rows = mid.rows();
    let hidden = p.mlp.w1.cols();
    let mut hidden_pre = Tensor::zeros(&[rows, hidden]);
    linear(ln2_out.data(), rows, &p.mlp.w1, &p.mlp.b1, hidden_pre.data_mut());
    let mut hidden_act = Tensor::zeros(&[rows, hidden]);
    gelu_slice(hidden_pre.data(), hidden_act.data_mut());
    let mut out = Tensor::zeros(mid.shape());
    linear(hidden_act.data(), rows, &p.mlp.w2, &p.mlp.b2, out.data_mut());
    out.add_assign(&mid)?;
    Ok((
        out,
        BlockCache {
            ln1,
            attn,
            ln2,
            ln2_out,
            hidden_pre,
            hidden_act,
        },
    ))
}

/// Backward of [`encoder_block_batch`]; accumulates into `grads`, returns `dx`.
pub fn encoder_block_backward<T: Real>(
    cache: &BlockCache<T>,
    p: &EncoderBlockParams<T>,
    dy: &Tensor<T>,
    grads: &mut EncoderBlockParams<T>,
) -> Result<Tensor<T>> {
    if dy.shape() != cache.ln2_out.shape() {
        return Err(Error::shape("encoder_block_backward", dy.shape(), cache.ln2_out.shape()));
    }
    let rows = dy.rows();
    let hidden = p.mlp.w1.cols();

    gemm(T::one(), cache.hidden_act.mat().t(), dy.mat(), T::one(), grads.mlp.w2.mat_mut());
    bias_grad_rows(dy.data(), grads.mlp.b2.data_mut());
    let mut dhidden = Tensor::zeros(&[rows, hidden]);
    gemm(T::one(), dy.mat(), p.mlp.w2.mat().t(), T::zero(), dhidden.mat_mut());
    gelu_backward_slice(cache.hidden_pre.data(), dhidden.data_mut());
    gemm(T::one(), cache.ln2_out.mat().t(), dhidden.mat(), T::one(), grads.mlp.w1.mat_mut());
    bias_grad_rows(dhidden.data(), grads.mlp.b1.data_mut());
    let mut dln2 = Tensor::zeros(dy.shape());
    gemm(T::one(), dhidden.mat(), p.mlp.w1.mat().t(), T::zero(), dln2.mat_mut());

    let (mut dmid, dg2, db2) = layer_norm_backward(&cache.ln2, &p.ln2.gamma, &dln2)?;
    grads.ln2.gamma.add_assign(&dg2)?;
    grads.ln2.beta.add_assign(&db2)?;
    dmid.add_assign(dy)?;

    let dln1 = attention_backward_batch(&cache.attn, &p.attn, &dmid, &mut grads.attn)?;
    let (mut dx, dg1, db1) = layer_norm_backward(&cache.ln1, &p.ln1.gamma, &dln1)?;
    grads.ln1.gamma.add_assign(&dg1)?;
    grads.ln1.beta.add_assign(&db1)?;
    dx.add_assign(&dmid)?;
    Ok(dx)
}
