//! Scalar-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use patchmerger::{MergerParams, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

/// Row-wise layer norm with biased variance.
pub fn layer_norm_ref(x: &[Vec<f64>], gamma: &[f64], beta: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) * r * gamma[k] + beta[k])
                .collect()
        })
        .collect()
}

pub fn softmax_ref(s: &[f64]) -> Vec<f64> {
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|v| v / sum).collect()
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Routing weights `a[i][j]` and merged tokens `y[j]` by explicit loops.
pub fn merge_ref(x: &Tensor<f64>, p: &MergerParams<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let z = layer_norm_ref(&rows(x), p.ln.gamma.data(), p.ln.beta.data());
    let (d, m) = (p.w.rows(), p.w.cols());
    let a: Vec<Vec<f64>> = z
        .iter()
        .map(|zi| {
            let s: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|k| zi[k] * p.w.at(k, j)).sum())
                .collect();
            softmax_ref(&s)
        })
        .collect();
    let y = (0..m)
        .map(|j| (0..d).map(|k| (0..z.len()).map(|i| a[i][j] * z[i][k]).sum()).collect())
        .collect();
    (a, y)
}

pub fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Multi-head self-attention by explicit loops; weights are `in x out`.
#[allow(clippy::too_many_arguments)]
pub fn attention_ref(
    x: &[Vec<f64>],
    heads: usize,
    wq: &Tensor<f64>,
    bq: &[f64],
    wk: &Tensor<f64>,
    bk: &[f64],
    wv: &Tensor<f64>,
    bv: &[f64],
    wo: &Tensor<f64>,
    bo: &[f64],
) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let proj = |w: &Tensor<f64>, b: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|xi| (0..d).map(|o| b[o] + (0..d).map(|k| xi[k] * w.at(k, o)).sum::<f64>()).collect())
            .collect()
    };
    let (q, k, v) = (proj(wq, bq), proj(wk, bk), proj(wv, bv));
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax_ref(&s);
            for c in 0..dh {
                ctx[i][off + c] = (0..n).map(|j| a[j] * v[j][off + c]).sum();
            }
        }
    }
    ctx.iter()
        .map(|ci| (0..d).map(|o| bo[o] + (0..d).map(|k| ci[k] * wo.at(k, o)).sum::<f64>()).collect())
        .collect()
}
