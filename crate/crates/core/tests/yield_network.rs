mod common;

use common::{fd_gradient, naive_conv2d, naive_linear, naive_maxpool, rel_err, relu};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soyscan::synthfield::{gen_plot_images, SeedImageOptions};
use soyscan::tensornet::{Tape, Tensor};
use soyscan::yieldnet::{
    extract_and_fuse, fuse, train_on_fused, FeatureExtractor, PlotImages, ReferenceExtractor,
    RegressorConfig, TrainConfig, YieldRegressor,
};

fn small_config() -> RegressorConfig {
    RegressorConfig {
        conv_channels: 5,
        fc1: 7,
        fc2: 3,
        ..RegressorConfig::for_input(4, 6, 6)
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_regressor(cfg: RegressorConfig, seed: u64) -> YieldRegressor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = YieldRegressor::<f64>::new(cfg, seed).unwrap();
    // non-zero biases so every term of the forward pass is exercised
    let params = base
        .parameters()
        .iter()
        .map(|p| random_tensor(p.shape(), &mut rng))
        .collect();
    YieldRegressor::from_parameters(cfg, params).unwrap()
}

/// Head forward written out with the reference kernels.
fn naive_forward(reg: &YieldRegressor<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let c = reg.config;
    let p: Vec<&[f64]> = reg.parameters().iter().map(|t| t.data()).collect();
    let n = x.shape()[0];
    let (mut h, s) = naive_conv2d(
        x.data(),
        [n, c.in_channels, c.height, c.width],
        p[0],
        [c.conv_channels, c.in_channels, c.kernel, c.kernel],
        p[1],
        1,
        c.kernel / 2,
    );
    relu(&mut h);
    let (h, s) = naive_maxpool(&h, s, c.pool, c.pool);
    let flat = s[1] * s[2] * s[3];
    let mut h = naive_linear(&h, n, flat, p[2], c.fc1, p[3]);
    relu(&mut h);
    let mut h = naive_linear(&h, n, c.fc1, p[4], c.fc2, p[5]);
    relu(&mut h);
    naive_linear(&h, n, c.fc2, p[6], 1, p[7])
}

#[test]
fn forward_matches_naive_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let reg = random_regressor(small_config(), seed);
        let x = random_tensor(&[3, 4, 6, 6], &mut rng);
        let got = reg.forward(&x).unwrap();
        let want = naive_forward(&reg, &x);
        assert_eq!(got.shape(), &[3, 1]);
        assert!(rel_err(got.data(), &want) < 1e-10);
    }
}

fn head_loss(reg: &YieldRegressor<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    soyscan::tensornet::ops::mse(&reg.forward(x).unwrap(), y).unwrap()
}

#[test]
fn head_gradients_match_finite_differences() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reg = random_regressor(cfg, 3);
    let x = random_tensor(&[2, 4, 6, 6], &mut rng);
    let y = random_tensor(&[2, 1], &mut rng);

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let yv = tape.leaf(y.clone());
    let (out, pv) = reg.forward_on(&mut tape, xv).unwrap();
    let loss = tape.mse(out, yv).unwrap();
    let grads = tape.backward(loss).unwrap();

    for (i, v) in pv.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().unwrap().data().to_vec();
        let numeric = fd_gradient(
            |w| {
                let mut params = reg.parameters().to_vec();
                params[i] = Tensor::from_vec(params[i].shape(), w.to_vec()).unwrap();
                head_loss(
                    &YieldRegressor::from_parameters(cfg, params).unwrap(),
                    &x,
                    &y,
                )
            },
            reg.parameters()[i].data(),
            1e-5,
        );
        let e = rel_err(&analytic, &numeric);
        assert!(
            e < 1e-4,
            "{}: relative error {e}",
            YieldRegressor::<f64>::parameter_names()[i]
        );
    }
}

#[test]
fn fuse_of_constant_side() {
    let m = Tensor::from_vec(&[3, 2, 2], (0..12).map(|i| 0.1 * i as f64 - 0.4).collect()).unwrap();
    let zero = Tensor::zeros(&[3, 2, 2]);
    let f = fuse(&vec![m.clone(); 10], &vec![zero; 10]).unwrap();
    assert_eq!(f.shape(), &[6, 2, 2]);
    for (i, v) in f.data().iter().enumerate() {
        let want = if i < 12 { 10.0 * m.data()[i] } else { 0.0 };
        assert!((v - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn fuse_ignores_order_within_a_side(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Tensor<f64>> = (0..10).map(|_| random_tensor(&[2, 3, 3], &mut rng)).collect();
        let b: Vec<Tensor<f64>> = (0..10).map(|_| random_tensor(&[2, 3, 3], &mut rng)).collect();
        let (mut pa, mut pb) = (a.clone(), b.clone());
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        prop_assert_eq!(fuse(&a, &b).unwrap(), fuse(&pa, &pb).unwrap());
    }

    #[test]
    fn fuse_scales_linearly(seed in any::<u64>(), alpha in 0.1..10.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Tensor<f64>> = (0..10).map(|_| random_tensor(&[1, 2, 2], &mut rng)).collect();
        let b: Vec<Tensor<f64>> = (0..10).map(|_| random_tensor(&[1, 2, 2], &mut rng)).collect();
        let scaled = |v: &[Tensor<f64>]| v.iter().map(|t| t.scale(alpha)).collect::<Vec<_>>();
        let lhs = fuse(&scaled(&a), &scaled(&b)).unwrap();
        let rhs = fuse(&a, &b).unwrap().scale(alpha);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }
}

fn tiny_plot(count_a: usize, count_b: usize, seed: u64) -> PlotImages {
    let opts = SeedImageOptions {
        width: 16,
        height: 16,
        semi_major: (1.5, 2.0),
        ..SeedImageOptions::default()
    };
    let img = |n: usize, s: u64| gen_plot_images(n, s, &opts).unwrap().0;
    PlotImages {
        side_a: (0..10).map(|i| img(count_a, seed * 100 + i)).collect(),
        side_b: (0..10).map(|i| img(count_b, seed * 100 + 50 + i)).collect(),
    }
}

#[test]
fn training_reduces_loss_and_leaves_extractor_untouched() {
    let ex = ReferenceExtractor::<f64>::new(8, 2);
    let before = ex.clone();
    let data: Vec<(Tensor<f64>, f64)> = (0..12)
        .map(|i| {
            let fused = extract_and_fuse(&ex, &tiny_plot(i % 4, (i / 4) % 3, i as u64)).unwrap();
            (fused, 2.0 + 0.25 * i as f64)
        })
        .collect();
    let [c, h, w] = *data[0].0.shape() else {
        unreachable!()
    };
    let cfg = RegressorConfig {
        conv_channels: 8,
        fc1: 16,
        fc2: 8,
        ..RegressorConfig::for_input(c, h, w)
    };
    let init = YieldRegressor::new(cfg, 1).unwrap();
    let out = train_on_fused(
        init,
        &data,
        &TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(out.loss_history.len(), 30);
    assert!(out.loss_history.iter().all(|l| l.is_finite()));
    assert!(out.loss_history[29] < out.loss_history[0]);
    assert_eq!(ex, before);
    assert_eq!(ex.channels(), 8);
}

#[test]
fn training_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<(Tensor<f64>, f64)> = (0..10)
        .map(|i| (random_tensor(&[4, 6, 6], &mut rng), i as f64))
        .collect();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let run =
        || train_on_fused(YieldRegressor::new(small_config(), 4).unwrap(), &data, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.regressor, b.regressor);
}

#[test]
fn single_precision_checkpoint_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let reg = YieldRegressor::<f32>::new(small_config(), 8).unwrap();
    let path = dir.path().join("head.ywts");
    reg.save(&path).unwrap();
    assert_eq!(YieldRegressor::<f32>::load(&path).unwrap(), reg);
}
