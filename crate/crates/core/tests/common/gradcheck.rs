//! Finite-difference check of the full network gradient.

use qsegment::data::synth_vessels;
use qsegment::model::build_model;
use qsegment::tensor::Tensor;
use qsegment::train::{backward, forward_train, loss, loss_and_grad};
use rand::Rng;

pub struct GradcheckReport {
    pub accepted: usize,
    /// Probes redrawn because the perturbation changed a pooling argmax or a
    /// ReLU activity pattern.
    pub redrawn: usize,
    pub worst: f64,
    pub worst_name: String,
}

/// Central differences at step `h` on `want` random parameters of a
/// freshly initialized model, training-mode forward, batch of two 16x16
/// synthetic samples.
///
/// Unpooling makes the network discontinuous where an argmax changes, and
/// ReLU kinks bias the difference quotient, so probes whose perturbation
/// leaves the current smooth piece are redrawn. The forward pass runs in f32
/// and the loss carries about 1e-8 absolute noise, so relative error uses
/// `|a - n| / max(|a|, |n|, floor * max|g|)`.
pub fn full_network(seed: u64, want: usize, h: f32, floor: f64) -> GradcheckReport {
    let mut m = build_model(seed);
    let s = synth_vessels(seed + 100, 2, (16, 16)).unwrap();
    let x = Tensor::stack(&[&s[0].image, &s[1].image]).unwrap();
    let y = Tensor::stack(&[&s[0].mask, &s[1].mask]).unwrap();
    let (z, trace) = forward_train(&m, &x).unwrap();
    let (_, dz) = loss_and_grad(&z, &y, 5.0).unwrap();
    let g = backward(&m, &trace, &dz).unwrap();
    let gmax = g.entries.iter().flat_map(|(_, v)| v).fold(0.0f32, |a, v| a.max(v.abs())) as f64;
    let mut r = super::rng(seed);
    let mut report = GradcheckReport { accepted: 0, redrawn: 0, worst: 0.0, worst_name: String::new() };
    while report.accepted < want && report.redrawn < 20 * want {
        let ti = r.random_range(0..g.entries.len());
        let j = r.random_range(0..g.entries[ti].1.len());
        let orig = m.trainable_mut()[ti].1[j];
        let mut eval = |v: f32| {
            m.trainable_mut()[ti].1[j] = v;
            let (z, t) = forward_train(&m, &x).unwrap();
            (loss(&z, &y, 5.0).unwrap().total, t.same_piece(&trace))
        };
        let (lp, sp) = eval(orig + h);
        let (lm, sm) = eval(orig - h);
        m.trainable_mut()[ti].1[j] = orig;
        if !(sp && sm) {
            report.redrawn += 1;
            continue;
        }
        let num = (lp - lm) / ((orig + h) as f64 - (orig - h) as f64);
        let a = g.entries[ti].1[j] as f64;
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor * gmax);
        if rel > report.worst {
            report.worst = rel;
            report.worst_name = format!("{}[{j}]", g.entries[ti].0);
        }
        report.accepted += 1;
    }
    report
}
