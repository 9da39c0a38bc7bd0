//! Randomized properties of the merger against a scalar-loop reference.

mod common;

use common::{merge_ref, randn};
use patchmerger::merger::{merge, merge_normalized, merge_weights, merge_with_cls, routing_weights};
use patchmerger::numcore::{layer_norm, LN_EPS};
use patchmerger::{MergerParams, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, n: usize, d: usize, m: usize) -> (Tensor<f64>, MergerParams<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[n, d], 1.0);
    let mut p = MergerParams::<f64>::zeros(d, m);
    p.w = randn(&mut rng, &[d, m], 1.0);
    p.ln.gamma = Tensor::from_fn(&[d], |i| 1.0 + 0.1 * ((i * 7 + seed as usize) % 5) as f64);
    p.ln.beta = randn(&mut rng, &[d], 0.1);
    (x, p)
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 128,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn matches_scalar_reference(seed in any::<u64>(), n in 1usize..=32, d in 2usize..=16, m in 1usize..=8) {
        let (x, p) = instance(seed, n, d, m);
        let y = merge(&x, &p).unwrap();
        let (_, y_ref) = merge_ref(&x, &p);
        for j in 0..m {
            for k in 0..d {
                prop_assert!((y.at(j, k) - y_ref[j][k]).abs() <= 1e-5 * (1.0 + y_ref[j][k].abs()));
            }
        }
    }

    #[test]
    fn routing_is_column_stochastic(seed in any::<u64>(), n in 1usize..=64, d in 2usize..=16, m in 1usize..=16) {
        let (x, p) = instance(seed, n, d, m);
        let a = merge_weights(&x, &p).unwrap();
        prop_assert_eq!(a.shape(), &[n, m][..]);
        for i in 0..n {
            let s: f64 = a.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn mass_is_conserved(seed in any::<u64>(), n in 1usize..=64, d in 2usize..=16, m in 1usize..=16) {
        let (x, p) = instance(seed, n, d, m);
        let (z, _) = layer_norm(&x, &p.ln.gamma, &p.ln.beta, LN_EPS).unwrap();
        let y = merge(&x, &p).unwrap();
        for k in 0..d {
            let sy: f64 = (0..m).map(|j| y.at(j, k)).sum();
            let sz: f64 = (0..n).map(|i| z.at(i, k)).sum();
            prop_assert!((sy - sz).abs() < 1e-4);
        }
    }

    #[test]
    fn permutation_invariant(seed in any::<u64>(), n in 1usize..=48, d in 2usize..=16, m in 1usize..=8) {
        let (x, p) = instance(seed, n, d, m);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let y = merge(&x, &p).unwrap();
        let y_perm = merge(&x.select_rows(&order), &p).unwrap();
        prop_assert!(y.max_abs_diff(&y_perm) < 1e-5);
    }

    #[test]
    fn duplicate_tokens_route_identically(seed in any::<u64>(), n in 2usize..=32, d in 2usize..=16, m in 1usize..=8) {
        let (mut x, p) = instance(seed, n, d, m);
        let (src, dst) = ((seed % n as u64) as usize, ((seed / 7) % n as u64) as usize);
        let row = x.row(src).to_vec();
        x.row_mut(dst).copy_from_slice(&row);
        let a = merge_weights(&x, &p).unwrap();
        prop_assert_eq!(a.row(src), a.row(dst));
    }

    #[test]
    fn output_count_is_fixed(seed in any::<u64>(), idx in 0usize..5, m in 1usize..=8) {
        let n = [1usize, 8, 49, 196, 400][idx];
        let d = 8;
        let (x, p) = instance(seed, n, d, m);
        let y = merge(&x, &p).unwrap();
        prop_assert_eq!(y.shape(), &[m, d][..]);
        prop_assert!(y.is_finite());
        let x_cls = Tensor::from_fn(&[n + 1, d], |i| if i < d { 0.5 } else { x.data()[i - d] });
        let y_cls = merge_with_cls(&x_cls, &p).unwrap();
        prop_assert_eq!(y_cls.shape(), &[m + 1, d][..]);
        prop_assert_eq!(y_cls.row(0), x_cls.row(0));
    }
}

#[test]
fn normalized_entry_points_agree() {
    let (x, p) = instance(3, 10, 6, 4);
    let (z, _) = layer_norm(&x, &p.ln.gamma, &p.ln.beta, LN_EPS).unwrap();
    let a = routing_weights(&z, &p.w).unwrap();
    let (a_ref, y_ref) = merge_ref(&x, &p);
    let y = merge_normalized(&z, &p.w).unwrap();
    for i in 0..10 {
        for j in 0..4 {
            assert!((a.at(i, j) - a_ref[i][j]).abs() < 1e-12);
        }
    }
    for j in 0..4 {
        for k in 0..6 {
            assert!((y.at(j, k) - y_ref[j][k]).abs() < 1e-12);
        }
    }
}
