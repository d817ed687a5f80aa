use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{avgpool_same, sigmoid_scalar, Tensor};

/// Window of the average pool that defines the boundary weighting.
pub const WEIGHT_POOL: usize = 31;
pub const DEFAULT_LAMBDA: f32 = 5.0;

/// Per-pixel loss weights `1 + lambda * |avgpool(gt) - gt|`: near 1 in flat
/// regions, up to `1 + lambda` on thin structures and boundaries.
pub fn weight_map(gt: &Tensor<f32>, lambda: f32) -> Result<Tensor<f32>> {
    check_binary(gt)?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let avg = avgpool_same(gt, WEIGHT_POOL)?;
    let mut w = avg;
    for (v, &g) in w.data_mut().iter_mut().zip(gt.data()) {
        *v = 1.0 + lambda * (*v - g).abs();
    }
    Ok(w)
}

fn check_binary(gt: &Tensor<f32>) -> Result<()> {
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("ground truth must be binary, found {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub wbce: f64,
    pub wiou: f64,
    pub total: f64,
}

/// Binary cross-entropy on a logit: `max(z, 0) - z*g + ln(1 + e^-|z|)`.
#[inline]
pub fn bce_with_logit(z: f32, g: f32) -> f64 {
    let z = z as f64;
    z.max(0.0) - z * g as f64 + (-z.abs()).exp().ln_1p()
}

pub fn loss(logits: &Tensor<f32>, gt: &Tensor<f32>, lambda: f32) -> Result<LossOutput> {
    loss_impl(logits, gt, lambda, false).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub fn loss_and_grad(logits: &Tensor<f32>, gt: &Tensor<f32>, lambda: f32) -> Result<(LossOutput, Tensor<f32>)> {
    loss_impl(logits, gt, lambda, true).map(|(l, g)| (l, g.expect("requested")))
}

/// Weighted BCE and weighted soft IoU, each reduced per image and averaged
/// over the batch; the total is their mean.
fn loss_impl(logits: &Tensor<f32>, gt: &Tensor<f32>, lambda: f32, grad: bool) -> Result<(LossOutput, Option<Tensor<f32>>)> {
    let s = logits.shape();
    if s != gt.shape() || s.c != 1 {
        return Err(Error::shape(format!("logits {s} vs ground truth {}", gt.shape())));
    }
    let w = weight_map(gt, lambda)?;
    let n = s.n;
    let mut g_out = grad.then(|| Tensor::zeros(s));
    let (mut wbce_sum, mut wiou_sum) = (0.0f64, 0.0f64);
    for b in 0..n {
        let (z, g, w) = (logits.sample(b), gt.sample(b), w.sample(b));
        let (mut sw, mut sbce, mut inter, mut union) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for ((&zi, &gi), &wi) in z.iter().zip(g).zip(w) {
            let (wi, gi64) = (wi as f64, gi as f64);
            let p = sigmoid_scalar(zi) as f64;
            sw += wi;
            sbce += wi * bce_with_logit(zi, gi);
            inter += wi * p * gi64;
            union += wi * (p + gi64 - p * gi64);
        }
        let (i1, u1) = (inter + 1.0, union + 1.0);
        wbce_sum += sbce / sw;
        wiou_sum += 1.0 - i1 / u1;
        if let Some(go) = g_out.as_mut() {
            let k = 1.0 / (2.0 * n as f64);
            for (((o, &zi), &gi), &wi) in go.sample_mut(b).iter_mut().zip(z).zip(g).zip(w) {
                let (wi, gi) = (wi as f64, gi as f64);
                let p = sigmoid_scalar(zi) as f64;
                let d_bce = wi * (p - gi) / sw;
                // d(I/U)/dp with dI/dp = w*g and dU/dp = w*(1-g)
                let d_ratio = wi * (gi * u1 - i1 * (1.0 - gi)) / (u1 * u1);
                let d_iou = -d_ratio * p * (1.0 - p);
                *o = (k * (d_bce + d_iou)) as f32;
            }
        }
    }
    let (wbce, wiou) = (wbce_sum / n as f64, wiou_sum / n as f64);
    Ok((LossOutput { wbce, wiou, total: (wbce + wiou) / 2.0 }, g_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn constant_masks_have_unit_weight() {
        let s = Shape::new(1, 1, 16, 16);
        for v in [0.0, 1.0] {
            let w = weight_map(&Tensor::full(s, v), 5.0).unwrap();
            assert!(w.data().iter().all(|&x| (x - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_logits_all_foreground() {
        let s = Shape::new(1, 1, 8, 8);
        let l = loss(&Tensor::zeros(s), &Tensor::ones(s), 5.0).unwrap();
        let a = 64.0;
        assert!((l.wbce - std::f64::consts::LN_2).abs() < 1e-9);
        assert!((l.wiou - (1.0 - (0.5 * a + 1.0) / (a + 1.0))).abs() < 1e-9);
        assert_eq!(l.total, (l.wbce + l.wiou) / 2.0);
    }

    #[test]
    fn confident_correct_logits() {
        let s = Shape::new(2, 1, 8, 8);
        let gt = Tensor::from_vec(s, (0..s.numel()).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();
        let z = gt.map(|g| if g == 1.0 { 30.0 } else { -30.0 });
        assert!(loss(&z, &gt, 5.0).unwrap().total <= 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = Shape::new(1, 1, 8, 8);
        assert!(loss(&Tensor::zeros(s), &Tensor::full(s, 0.5), 5.0).is_err());
        assert!(loss(&Tensor::zeros(s), &Tensor::zeros(Shape::new(1, 1, 8, 16)), 5.0).is_err());
    }
}
