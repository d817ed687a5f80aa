//! Brute-force oracles shared by the integration tests. Nothing in this
//! file calls into the kernels under test.
#![allow(dead_code)]

pub mod gradcheck;

use qsegment::tensor::{ConvParams, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, shape: Shape, p: f64) -> Tensor<f32> {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_bool(p) as u8 as f32).collect()).unwrap()
}

/// Direct sliding-window convolution in f64.
pub fn conv_oracle(x: &Tensor<f32>, p: &ConvParams) -> (Shape, Vec<f64>) {
    let s = x.shape();
    let ws = p.weight.shape();
    let (k, g) = (ws.h, p.groups);
    let ho = (s.h + 2 * p.padding - k) / p.stride + 1;
    let wo = (s.w + 2 * p.padding - k) / p.stride + 1;
    let (cin_g, cout_g) = (s.c / g, ws.n / g);
    let mut out = Vec::with_capacity(s.n * ws.n * ho * wo);
    for n in 0..s.n {
        for oc in 0..ws.n {
            let grp = oc / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| b[oc] as f64);
                    for j in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * p.stride + ky) as i64 - p.padding as i64;
                                let ix = (ox * p.stride + kx) as i64 - p.padding as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                    acc += p.weight.at(oc, j, ky, kx) as f64
                                        * x.at(n, grp * cin_g + j, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (Shape::new(s.n, ws.n, ho, wo), out)
}

/// 2x2/2 max pool; first maximum in raster order wins.
pub fn maxpool_oracle(x: &Tensor<f32>) -> (Vec<f32>, Vec<i32>) {
    let s = x.shape();
    let (mut v, mut idx) = (Vec::new(), Vec::new());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..s.h / 2 {
                for ox in 0..s.w / 2 {
                    let mut best = (f32::NEG_INFINITY, -1i32);
                    for y in 2 * oy..2 * oy + 2 {
                        for xx in 2 * ox..2 * ox + 2 {
                            let val = x.at(n, c, y, xx);
                            if best.1 < 0 || val > best.0 {
                                best = (val, (y * s.w + xx) as i32);
                            }
                        }
                    }
                    v.push(best.0);
                    idx.push(best.1);
                }
            }
        }
    }
    (v, idx)
}

/// Mean over the in-bounds part of each k x k window.
pub fn avgpool_oracle(x: &Tensor<f32>, k: usize) -> Vec<f64> {
    let s = x.shape();
    let r = (k / 2) as i64;
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h as i64 {
                for xx in 0..s.w as i64 {
                    let (mut sum, mut cnt) = (0.0f64, 0usize);
                    for yy in y - r..=y + r {
                        for xw in xx - r..=xx + r {
                            if yy >= 0 && xw >= 0 && yy < s.h as i64 && xw < s.w as i64 {
                                sum += x.at(n, c, yy as usize, xw as usize) as f64;
                                cnt += 1;
                            }
                        }
                    }
                    out.push(sum / cnt as f64);
                }
            }
        }
    }
    out
}

/// Probability that a random positive outranks a random negative, ties 1/2.
pub fn pairwise_auc(scores: &[f32], labels: &[f32]) -> f64 {
    let (mut wins, mut pairs) = (0.0f64, 0.0f64);
    for (i, &li) in labels.iter().enumerate() {
        if li != 1.0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0.0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// `(tp, tn, fp, fn)` by walking every pixel.
pub fn count_confusion(probs: &[f32], gt: &[f32], thr: f32) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&p, &g) in probs.iter().zip(gt) {
        let pred = p >= thr;
        let truth = g == 1.0;
        if pred && truth {
            c.0 += 1;
        } else if !pred && !truth {
            c.1 += 1;
        } else if pred {
            c.2 += 1;
        } else {
            c.3 += 1;
        }
    }
    c
}

/// Trainable scalars of the default network, counted layer by layer from the
/// layer table: 3x3 conv (+bias), BN, 1x1 conv (+bias), depthwise 3x3, BN.
pub fn parameter_count_script() -> usize {
    let layers = [(3, 16), (16, 32), (32, 64), (64, 64), (64, 32), (32, 16), (16, 16)];
    let mut total = 0;
    for (cin, cout) in layers {
        let conv3 = 9 * cin * cout + cout;
        let bn = 2 * cout;
        let conv1 = cout * cout + cout;
        let dw = 9 * cout;
        total += conv3 + bn + conv1 + dw + bn;
    }
    total + 9 * 16 + 1
}
