//! Finite-difference audit of the hand-written backward passes, grouped by
//! parameter tensor. Runs in 64-bit on small randomized instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::merger::{merge_batch, merge_batch_backward, MergerConfig, MergerParams};
use crate::numcore::{check_gradient, Tensor, DEFAULT_STEP};
use crate::vit::{
    attention_backward_batch, attention_batch, cross_entropy, encoder_block_backward,
    encoder_block_batch, AttentionParams, EncoderBlockParams, Model, ModelConfig, ParamVisitor,
};

/// Worst relative error over one parameter tensor (or an input).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradGroup {
    pub name: String,
    pub max_rel_error: f64,
}

fn jitter<P: ParamVisitor<f64>>(p: &mut P, std: f64, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |_, t| {
        let noise = Tensor::randn(t.shape(), std, rng);
        t.add_assign(&noise).expect("same shape");
    });
}

/// Checks every tensor of `params` separately against `loss`.
fn per_tensor<P: ParamVisitor<f64> + Clone>(
    prefix: &str,
    params: &P,
    grads: &P,
    loss: impl Fn(&P) -> f64,
    out: &mut Vec<GradGroup>,
) -> Result<()> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Tensor<f64>> = grads.named().into_iter().map(|(_, g)| g.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        let base = params.named()[i].1.clone();
        let mut probe = params.clone();
        let r = check_gradient(
            |v| {
                probe.named_mut()[i].1.data_mut().copy_from_slice(v.data());
                loss(&probe)
            },
            &base,
            &analytic[i],
            DEFAULT_STEP,
        )?;
        out.push(GradGroup {
            name: format!("{prefix}{name}"),
            max_rel_error: r.max_rel_error,
        });
    }
    Ok(())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn input_group(name: &str, r: crate::numcore::GradCheck) -> GradGroup {
    GradGroup {
        name: name.into(),
        max_rel_error: r.max_rel_error,
    }
}

/// Merger block on its own (with a pass-through cls row), attention, one
/// encoder block, then a small merger model end to end.
pub fn gradcheck_groups(seed: u64) -> Result<Vec<GradGroup>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (batch, tokens, d, m) = (2, 7, 6, 3);
    let mut mp = MergerParams::<f64>::init(d, m, &mut rng);
    jitter(&mut mp, 0.5, &mut rng);
    let x = Tensor::randn(&[batch * tokens, d], 1.0, &mut rng);
    let r = Tensor::randn(&[batch * (m + 1), d], 1.0, &mut rng);
    let (_, cache) = merge_batch(&x, batch, tokens, &mp, true)?;
    let mut grads = MergerParams::zeros(d, m);
    let dx = merge_batch_backward(&cache, &mp, &r, &mut grads)?;
    let f = |p: &MergerParams<f64>, x: &Tensor<f64>| {
        dot(&merge_batch(x, batch, tokens, p, true).expect("valid shapes").0, &r)
    };
    per_tensor("merger-block/", &mp, &grads, |p| f(p, &x), &mut out)?;
    out.push(input_group("merger-block/input", check_gradient(|v| f(&mp, v), &x, &dx, DEFAULT_STEP)?));

    let (batch, tokens, d, heads) = (2, 5, 8, 2);
    let mut ap = AttentionParams::<f64>::init(d, heads, &mut rng);
    jitter(&mut ap, 0.25, &mut rng);
    let x = Tensor::randn(&[batch * tokens, d], 1.0, &mut rng);
    let r = Tensor::randn(&[batch * tokens, d], 1.0, &mut rng);
    let (_, cache) = attention_batch(&x, batch, tokens, &ap)?;
    let mut grads = AttentionParams::zeros(d, heads);
    let dx = attention_backward_batch(&cache, &ap, &r, &mut grads)?;
    let f = |p: &AttentionParams<f64>, x: &Tensor<f64>| {
        dot(&attention_batch(x, batch, tokens, p).expect("valid shapes").0, &r)
    };
    per_tensor("attention/", &ap, &grads, |p| f(p, &x), &mut out)?;
    out.push(input_group("attention/input", check_gradient(|v| f(&ap, v), &x, &dx, DEFAULT_STEP)?));

    let mut bp = EncoderBlockParams::<f64>::init(d, heads, 16, &mut rng);
    jitter(&mut bp, 0.3, &mut rng);
    let (_, cache) = encoder_block_batch(&x, batch, tokens, &bp)?;
    let mut grads = EncoderBlockParams::zeros(d, heads, 16);
    let dx = encoder_block_backward(&cache, &bp, &r, &mut grads)?;
    let f = |p: &EncoderBlockParams<f64>, x: &Tensor<f64>| {
        dot(&encoder_block_batch(x, batch, tokens, p).expect("valid shapes").0, &r)
    };
    per_tensor("block/", &bp, &grads, |p| f(p, &x), &mut out)?;
    out.push(input_group("block/input", check_gradient(|v| f(&bp, v), &x, &dx, DEFAULT_STEP)?));

    let config = ModelConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        hidden_dim: 8,
        depth: 2,
        num_heads: 2,
        mlp_dim: 16,
        num_classes: 3,
        use_cls_token: true,
        merger: Some(MergerConfig::new(1, 2)),
        pooling: None,
    };
    let mut model = Model::<f64>::init(config, &mut rng)?;
    jitter(&mut model.params, 0.2, &mut rng);
    let images = Tensor::randn(&[3, 4, 4, 1], 0.5, &mut rng);
    let labels = [0, 2, 1];
    let (logits, cache) = model.forward_cached(&images)?;
    let (_, dlogits) = cross_entropy(&logits, &labels)?;
    let grads = model.backward(&cache, &dlogits)?;
    let cfg = model.config.clone();
    per_tensor(
        "model/",
        &model.params,
        &grads,
        |p| {
            let m = Model::new(cfg.clone(), p.clone()).expect("same config");
            let logits = m.forward(&images).expect("finite forward");
            cross_entropy(&logits, &labels).expect("labels in range").0
        },
        &mut out,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_groups_pass() {
        let groups = gradcheck_groups(0).unwrap();
        assert!(groups.iter().any(|g| g.name == "merger-block/W"));
        assert!(groups.iter().any(|g| g.name == "model/merger/W"));
        assert!(groups.iter().any(|g| g.name == "attention/wq"));
        assert!(groups.iter().any(|g| g.name == "block/mlp/w1"));
        for g in &groups {
            assert!(g.max_rel_error < 1e-5, "{g:?}");
        }
    }
}
