//! Benchmark fixtures.

use patchmerger::{MergerParams, Model, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tokens(n: usize, d: usize) -> Tensor<f32> {
    Tensor::randn(&[n, d], 1.0, &mut rng(1))
}

pub fn merger(d: usize, m: usize) -> MergerParams<f32> {
    MergerParams::init(d, m, &mut rng(2))
}

pub fn toy_model(merged: bool) -> Model<f32> {
    let c = ModelConfig::toy();
    let m = merged.then(|| c.mid_merger(8).expect("toy depth is even"));
    Model::init(c.with_merger(m), &mut rng(3)).expect("toy config is valid")
}

pub fn images(batch: usize) -> Tensor<f32> {
    Tensor::randn(&[batch, 64, 64, 1], 0.5, &mut rng(4))
}
