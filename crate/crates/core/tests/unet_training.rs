mod common;

use clutter4d::ops4d::mse_loss;
use clutter4d::unet::{
    adam_step, build_unet, train, AdamConfig, AdamState, Sample, TrainConfig, UNet4D, UNet4DConfig,
};
use clutter4d::{Fill, Tensor6D};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini() -> UNet4DConfig {
    UNet4DConfig {
        levels: 2,
        base_channels: 2,
        ..UNet4DConfig::default()
    }
}

#[test]
fn zero_input_maps_into_open_unit_interval() {
    let net = build_unet(&UNet4DConfig::default(), 1).unwrap();
    let y = net.predict(&Tensor6D::zeros([1, 4, 8, 8, 8, 4])).unwrap();
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn reference_patch_shape_is_preserved() {
    let net = build_unet(&UNet4DConfig::default(), 2).unwrap();
    let x = normal([2, 4, 16, 16, 16, 8], 3);
    assert_eq!(net.predict(&x).unwrap().shape(), [2, 1, 16, 16, 16, 8]);
}

#[test]
fn he_initialization_variance() {
    let net = build_unet(&UNet4DConfig::default(), 4).unwrap();
    let mut checked = 0;
    for block in net.encoder.iter().flatten().chain(net.decoder.iter().flatten()) {
        let w = &block.conv.weight;
        if w.len() < 10_000 {
            continue;
        }
        let fan_in = (w.len() / w.shape()[0]) as f64;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / fan_in;
        assert!((var / expect - 1.0).abs() < 0.2, "variance {var}, expected {expect}");
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn first_adam_step_moves_by_lr() {
    let mut p = Tensor6D::zeros([1, 1, 1, 1, 1, 1]);
    let g = Tensor6D::full([1, 1, 1, 1, 1, 1], 1.0);
    let cfg = AdamConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&[&p]);
    adam_step(&mut [&mut p], &[g], &mut state, &cfg).unwrap();
    // bias-corrected moments after one step: m = g, v = g^2
    let expect = -(cfg.lr as f64) * 1.0 / (1.0 + cfg.eps as f64);
    assert!((p.data()[0] as f64 - expect).abs() < 1e-9, "{}", p.data()[0]);
}

fn model_loss(net: &UNet4D, x: &Tensor6D, target: &Tensor6D) -> f64 {
    let (y, _) = net.clone().forward_train(x).unwrap();
    mse_loss(&y, target).unwrap().0
}

#[test]
fn whole_model_gradient_check() {
    for seed in 0..5u64 {
        let mut net = build_unet(&mini(), 10 + seed).unwrap();
        // move gamma and beta off their initial values so their gradients are generic
        for bn in net.batch_norms_mut() {
            bn.gamma = bn.gamma.map(|v| v + 0.3);
            bn.beta = bn.beta.map(|v| v + 0.1);
        }
        let x = normal([1, 4, 8, 8, 8, 8], 20 + seed);
        let target = Tensor6D::seeded_fill([1, 1, 8, 8, 8, 8], Fill::Uniform { low: 0.0, high: 1.0 }, 30 + seed)
            .unwrap();
        let (y, tape) = net.clone().forward_train(&x).unwrap();
        let (_, go) = mse_loss(&y, &target).unwrap();
        let grads = net.backward(&go, &tape).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let names = net.param_names();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut picked = Vec::new();
        while analytic.len() < 24 {
            let pi = rng.random_range(0..names.len());
            // conv biases feeding a batch norm have an identically zero gradient
            if names[pi].ends_with("conv.bias") {
                continue;
            }
            let ei = rng.random_range(0..grads[pi].len());
            // smaller than the per-operator step: larger steps cross leaky-relu
            // kinks and max-pool switches somewhere in the network
            let h = 1e-4f32;
            let mut plus = net.clone();
            plus.params_mut()[pi].data_mut()[ei] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi].data_mut()[ei] -= h;
            let fd = (model_loss(&plus, &x, &target) - model_loss(&minus, &x, &target)) / (2.0 * h as f64);
            analytic.push(grads[pi].data()[ei]);
            numeric.push(fd);
            picked.push(names[pi].clone());
        }
        let rel = gradient_rel_err(&analytic, &numeric);
        assert!(rel < 1e-2, "seed {seed}: relative error {rel} over {picked:?}");
    }
}

#[test]
fn conv_bias_before_batchnorm_has_zero_gradient() {
    let mut net = build_unet(&mini(), 3).unwrap();
    let x = normal([1, 4, 8, 8, 8, 8], 4);
    let (y, tape) = net.forward_train(&x).unwrap();
    let grads = net.backward(&y, &tape).unwrap();
    for (name, g) in net.param_names().iter().zip(&grads) {
        if name.ends_with("conv.bias") {
            assert!(g.data().iter().all(|v| v.abs() < 1e-4), "{name}: {:?}", g.data());
        }
    }
}

fn identity_dataset(n: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let input = Tensor6D::seeded_fill(
                [1, 4, 8, 8, 8, 4],
                Fill::Uniform { low: 0.1, high: 0.9 },
                seed * 1000 + i as u64,
            )
            .unwrap();
            let target = input.channel(1).unwrap();
            Sample { input, target }
        })
        .collect()
}

#[test]
fn learns_to_copy_an_input_channel() {
    let data = identity_dataset(8, 1);
    let mut net = build_unet(&mini(), 5).unwrap();
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        epochs: 50,
        batch_size: 2,
        seed: 2,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &data, &cfg, |_| {}).unwrap();
    assert!(report.diverged.is_none());
    assert_eq!(report.state.step, 200);
    let first = report.history[0].train_mse;
    let last = report.history.last().unwrap().train_mse;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn zero_learning_rate_keeps_training_loss_constant() {
    let data = identity_dataset(6, 2);
    let mut net = build_unet(&mini(), 6).unwrap();
    let before = net.params().into_iter().cloned().collect::<Vec<_>>();
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        epochs: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &data, &cfg, |_| {}).unwrap();
    let h = &report.history;
    for r in h {
        assert!((r.train_mse - h[0].train_mse).abs() <= 1e-12 * h[0].train_mse);
    }
    assert_eq!(net.params().into_iter().cloned().collect::<Vec<_>>(), before);
}

#[test]
fn training_is_seed_deterministic() {
    let data = identity_dataset(6, 3);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = build_unet(&mini(), 7).unwrap();
        let r = train(&mut net, &data, &cfg, |_| {}).unwrap();
        (net, r.history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
}

#[test]
fn empty_dataset_is_rejected() {
    let mut net = build_unet(&mini(), 1).unwrap();
    assert!(train(&mut net, &[], &TrainConfig::default(), |_| {}).is_err());
}
