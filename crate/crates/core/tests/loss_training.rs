mod common;

use common::*;
use proptest::prelude::*;
use qsegment::data::{synth_vessels, AugmentConfig, DatasetIndex};
use qsegment::model::build_model;
use qsegment::tensor::{avgpool_same, Shape, Tensor};
use qsegment::train::*;
use qsegment::ModelGraph;

/// Central finite differences of the total loss with respect to the logits.
fn numeric_logit_grad(z: &Tensor<f32>, g: &Tensor<f32>, h: f64) -> Vec<f64> {
    // Evaluate the loss in f64 on perturbed copies: f32 logits can't carry
    // a 1e-3 step without noticeable rounding.
    (0..z.len())
        .map(|i| {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.data_mut()[i] += h as f32;
            zm.data_mut()[i] -= h as f32;
            let step = zp.data()[i] as f64 - zm.data()[i] as f64;
            (loss(&zp, g, 5.0).unwrap().total - loss(&zm, g, 5.0).unwrap().total) / step
        })
        .collect()
}

#[test]
fn closed_form_zero_logits_full_foreground() {
    for (h, w) in [(8, 8), (16, 24)] {
        let s = Shape::new(1, 1, h, w);
        let out = loss(&Tensor::zeros(s), &Tensor::full(s, 1.0), 5.0).unwrap();
        let a = (h * w) as f64;
        assert!((out.wbce - std::f64::consts::LN_2).abs() <= 1e-6);
        assert!((out.wiou - (1.0 - (0.5 * a + 1.0) / (a + 1.0))).abs() <= 1e-9);
        assert!((out.total - (out.wbce + out.wiou) / 2.0).abs() <= 1e-12);
    }
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    let mut r = rng(4);
    let g = random_mask(&mut r, Shape::new(2, 1, 16, 16), 0.3);
    let z = g.map(|v| if v > 0.5 { 30.0 } else { -30.0 });
    assert!(loss(&z, &g, 5.0).unwrap().total <= 1e-6);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(8);
    let z = uniform(&mut r, Shape::new(2, 1, 8, 8), -3.0, 3.0);
    let g = random_mask(&mut r, z.shape(), 0.4);
    let (_, analytic) = loss_and_grad(&z, &g, 5.0).unwrap();
    let numeric = numeric_logit_grad(&z, &g, 1e-3);
    let worst = analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a as f64 - n).abs() / (a as f64).abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max);
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    let rep = common::gradcheck::full_network(3, 200, 1e-3, 1e-2);
    assert_eq!(rep.accepted, 200, "only {} probes stayed on one smooth piece", rep.accepted);
    assert!(rep.worst <= 1e-2, "worst relative error {} at {}", rep.worst, rep.worst_name);
}

#[test]
fn weight_map_matches_window_oracle() {
    let mut r = rng(9);
    let g = random_mask(&mut r, Shape::new(1, 1, 40, 35), 0.2);
    let w = weight_map(&g, 3.0).unwrap();
    let avg = avgpool_oracle(&g, WEIGHT_POOL);
    for ((&w, &a), &gv) in w.data().iter().zip(&avg).zip(g.data()) {
        assert!((w as f64 - (1.0 + 3.0 * (a - gv as f64).abs())).abs() <= 1e-5);
    }
    assert_eq!(avgpool_same(&g, WEIGHT_POOL).unwrap().shape(), g.shape());
}

#[test]
fn non_binary_ground_truth_rejected() {
    let z = Tensor::zeros(Shape::new(1, 1, 4, 4));
    let g = Tensor::full(Shape::new(1, 1, 4, 4), 0.5);
    assert!(loss(&z, &g, 5.0).is_err());
}

#[test]
fn schedule_restarts_and_halves() {
    let cfg = TrainConfig::default();
    for e in [0, 20, 40] {
        assert_eq!(lr_schedule(e, &cfg), 1e-3);
    }
    assert!((lr_schedule(10, &cfg) - 5e-4).abs() <= 1e-12);
    for e in 0..100 {
        assert_eq!(lr_schedule(e, &cfg), lr_schedule(e + 20, &cfg));
        assert!(lr_schedule(e, &cfg) >= 0.0 && lr_schedule(e, &cfg) <= 1e-3);
    }
}

fn unit_gradients(model: &mut ModelGraph, value: f32) -> Gradients {
    Gradients { entries: model.trainable_mut().into_iter().map(|(n, p)| (n, vec![value; p.len()])).collect() }
}

#[test]
fn sgd_step_is_plain_descent() {
    let mut m = build_model(1);
    let before: Vec<Vec<f32>> = m.trainable_mut().into_iter().map(|(_, p)| p.to_vec()).collect();
    let g = unit_gradients(&mut m, 2.0);
    sgd_step(&mut m, &g, 0.25).unwrap();
    for ((_, p), b) in m.trainable_mut().into_iter().zip(&before) {
        for (x, y) in p.iter().zip(b) {
            assert_eq!(*x, y - 0.5);
        }
    }
    let snapshot = m.clone();
    sgd_step(&mut m, &g, 0.0).unwrap();
    assert_eq!(m, snapshot);
}

#[test]
fn sgd_rejects_nan_without_mutating() {
    let mut m = build_model(1);
    let mut g = unit_gradients(&mut m, 1.0);
    let last = g.entries.len() - 1;
    g.entries[last].1[0] = f32::NAN;
    let snapshot = m.clone();
    assert!(sgd_step(&mut m, &g, 0.1).is_err());
    assert_eq!(m, snapshot);
}

#[test]
fn backward_without_forward_is_an_error() {
    let m = build_model(0);
    let mut tape = GradTape::new();
    assert!(tape.backward(&m, &Tensor::zeros(Shape::new(1, 1, 16, 16))).is_err());
}

#[test]
fn single_sample_overfits() {
    let data = DatasetIndex::synthetic_sized(21, (64, 64), 1, 0).unwrap();
    let cfg = TrainConfig {
        lr0: 0.05,
        max_steps: Some(200),
        epochs: 200,
        seed: 3,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    let out = train(&cfg, &data).unwrap();
    assert_eq!(out.steps, 200);
    let first = out.log.first().unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn training_log_is_reproducible() {
    let data = DatasetIndex::synthetic_sized(5, (16, 16), 6, 2).unwrap();
    let cfg = TrainConfig { lr0: 0.05, batch_size: 4, epochs: 6, seed: 11, ..TrainConfig::default() };
    let lines = |cfg: &TrainConfig| {
        let mut v = Vec::new();
        train_with(cfg, &data, &mut |r| v.push(r.to_json_line())).unwrap();
        v.join("\n")
    };
    let a = lines(&cfg);
    assert_eq!(a, lines(&cfg));
    assert_eq!(a.lines().count(), 6);
    let other = TrainConfig { seed: 12, ..cfg.clone() };
    assert_ne!(a, lines(&other));
}

fn batch(seed: u64, n: usize, hw: usize) -> (Tensor<f32>, Tensor<f32>) {
    let s = synth_vessels(seed, n, (hw, hw)).unwrap();
    let x = Tensor::stack(&s.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let y = Tensor::stack(&s.iter().map(|s| &s.mask).collect::<Vec<_>>()).unwrap();
    (x, y)
}

#[test]
fn negative_gradient_step_lowers_the_loss() {
    let (x, y) = batch(4, 2, 16);
    let mut m = build_model(6);
    let (z, tr) = forward_train(&m, &x).unwrap();
    let (l0, dz) = loss_and_grad(&z, &y, 5.0).unwrap();
    let g = backward(&m, &tr, &dz).unwrap();
    sgd_step(&mut m, &g, 1e-4 / g.global_norm().max(1e-12)).unwrap();
    let l1 = loss(&forward_train(&m, &x).unwrap().0, &y, 5.0).unwrap();
    assert!(l1.total < l0.total);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weight_map_bounds(seed in any::<u64>(), lambda in 0.0f32..10.0) {
        let mut r = rng(seed);
        let g = random_mask(&mut r, Shape::new(1, 1, 20, 20), 0.3);
        let w = weight_map(&g, lambda).unwrap();
        prop_assert!(w.data().iter().all(|&v| v >= 1.0 && v <= 1.0 + lambda + 1e-5));
    }

    #[test]
    fn loss_ranges(seed in any::<u64>()) {
        let mut r = rng(seed);
        let z = uniform(&mut r, Shape::new(2, 1, 8, 8), -6.0, 6.0);
        let g = random_mask(&mut r, z.shape(), 0.5);
        let l = loss(&z, &g, 5.0).unwrap();
        prop_assert!(l.wbce >= 0.0);
        prop_assert!(l.wiou >= 0.0 && l.wiou < 1.0);
    }

    #[test]
    fn loss_flip_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let z = uniform(&mut r, Shape::new(1, 1, 12, 9), -4.0, 4.0);
        let g = random_mask(&mut r, z.shape(), 0.3);
        let a = loss(&z, &g, 5.0).unwrap();
        let b = loss(&z.flip_horizontal(), &g.flip_horizontal(), 5.0).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-9);
    }

    #[test]
    fn logit_descent_lowers_loss(seed in any::<u64>()) {
        let mut r = rng(seed);
        let z = uniform(&mut r, Shape::new(1, 1, 8, 8), -3.0, 3.0);
        let g = random_mask(&mut r, z.shape(), 0.4);
        let (l0, dz) = loss_and_grad(&z, &g, 5.0).unwrap();
        let norm = dz.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let mut z1 = z.clone();
        for (v, d) in z1.data_mut().iter_mut().zip(dz.data()) {
            *v -= (1e-4 * *d as f64 / norm) as f32 * 10.0;
        }
        prop_assert!(loss(&z1, &g, 5.0).unwrap().total < l0.total);
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut r = rng(seed);
        let m = build_model(seed % 7);
        let x = uniform(&mut r, Shape::new(2, 3, 8, 8), 0.0, 1.0);
        let (_, tr) = forward_train(&m, &x).unwrap();
        let d1 = uniform(&mut r, Shape::new(2, 1, 8, 8), -1.0, 1.0);
        let d2 = uniform(&mut r, Shape::new(2, 1, 8, 8), -1.0, 1.0);
        let mut d = d1.clone();
        for ((v, p), q) in d.data_mut().iter_mut().zip(d1.data()).zip(d2.data()) {
            *v = a * p + b * q;
        }
        let g1 = backward(&m, &tr, &d1).unwrap();
        let g2 = backward(&m, &tr, &d2).unwrap();
        let g = backward(&m, &tr, &d).unwrap();
        // Conv biases feeding train-mode BN have zero gradient up to
        // round-off, so each tensor's scale is floored by the global one.
        let global = g1.entries.iter().chain(&g2.entries).flat_map(|(_, v)| v).fold(0.0f32, |m, v| m.max(v.abs()));
        for (((name, x), (_, y)), (_, z)) in g.entries.iter().zip(&g1.entries).zip(&g2.entries) {
            let scale = y.iter().chain(z).fold(1e-3 * global, |m, v| m.max(v.abs()));
            for ((x, y), z) in x.iter().zip(y).zip(z) {
                prop_assert!((x - (a * y + b * z)).abs() <= 1e-3 * scale * (a.abs() + b.abs() + 1.0), "{} {} {} {} {}", name, x, y, z, global);
            }
        }
    }
}

