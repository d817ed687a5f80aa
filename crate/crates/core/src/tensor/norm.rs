//! Per-channel batch normalization.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNormParams {
    pub const DEFAULT_EPS: f32 = 1e-5;
    pub const DEFAULT_MOMENTUM: f32 = 0.1;

    /// Identity-initialized parameters: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(c: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape("batchnorm parameter vectors differ in length"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("batchnorm eps must be positive"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid("batchnorm momentum must lie in (0, 1)"));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("batchnorm running variance must be non-negative"));
        }
        Ok(())
    }

    fn check(&self, s: Shape) -> Result<()> {
        self.validate()?;
        if s.c != self.channels() {
            return Err(Error::shape(format!("batchnorm over {} channels given {}", self.channels(), s)));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that eval-mode output is `scale * x + shift`.
    pub fn eval_affine(&self) -> Vec<(f32, f32)> {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
                let scale = self.gamma[c] * inv;
                (scale, self.beta[c] - self.running_mean[c] * scale)
            })
            .collect()
    }

    /// Folds freshly observed batch statistics into the running estimates.
    /// `batch_var` is the biased variance; the running estimate stores the unbiased one.
    pub fn update_running(&mut self, batch_mean: &[f32], batch_var: &[f32], count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 { count as f32 / (count - 1) as f32 } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * batch_mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * batch_var[c] * unbias;
        }
    }
}

/// Eval-mode normalization with running statistics.
pub fn batchnorm(input: &Tensor<f32>, params: &BatchNormParams) -> Result<Tensor<f32>> {
    let s = input.shape();
    params.check(s)?;
    let affine = params.eval_affine();
    let mut out = input.clone();
    for n in 0..s.n {
        for (c, &(a, b)) in affine.iter().enumerate() {
            out.plane_mut(n, c).iter_mut().for_each(|v| *v = a * *v + b);
        }
    }
    Ok(out)
}

/// What train-mode normalization keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct BnTrainCache {
    pub x_hat: Tensor<f32>,
    pub inv_std: Vec<f32>,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
    pub count: usize,
}

/// Train-mode normalization with batch statistics over `(n, h, w)`. Running
/// statistics are not touched here; apply [`BatchNormParams::update_running`]
/// with the returned cache.
pub fn batchnorm_train(input: &Tensor<f32>, params: &BatchNormParams) -> Result<(Tensor<f32>, BnTrainCache)> {
    let s = input.shape();
    params.check(s)?;
    let count = s.n * s.plane();
    if count == 0 {
        return Err(Error::shape("batchnorm over an empty tensor"));
    }
    let mut x_hat = input.clone();
    let mut out = input.clone();
    let mut inv_std = vec![0.0; s.c];
    let mut batch_mean = vec![0.0; s.c];
    let mut batch_var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut sum = 0.0f64;
        for n in 0..s.n {
            sum += input.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / count as f64;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            sq += input.plane(n, c).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
        }
        let var = sq / count as f64;
        let inv = 1.0 / (var + params.eps as f64).sqrt();
        let (mean32, inv32) = (mean as f32, inv as f32);
        for n in 0..s.n {
            let xh = x_hat.plane_mut(n, c);
            xh.iter_mut().for_each(|v| *v = (*v - mean32) * inv32);
            let o = out.plane_mut(n, c);
            for (o, &h) in o.iter_mut().zip(x_hat.plane(n, c)) {
                *o = params.gamma[c] * h + params.beta[c];
            }
        }
        inv_std[c] = inv32;
        batch_mean[c] = mean32;
        batch_var[c] = var as f32;
    }
    Ok((out, BnTrainCache { x_hat, inv_std, batch_mean, batch_var, count }))
}

/// Returns `(d_input, d_gamma, d_beta)` for train-mode normalization.
pub fn batchnorm_train_backward(
    grad_out: &Tensor<f32>,
    cache: &BnTrainCache,
    params: &BatchNormParams,
) -> Result<(Tensor<f32>, Vec<f32>, Vec<f32>)> {
    let s = grad_out.shape();
    if s != cache.x_hat.shape() {
        return Err(Error::shape(format!("batchnorm gradient {s} vs cached {}", cache.x_hat.shape())));
    }
    let m = cache.count as f64;
    let mut gx = Tensor::zeros(s);
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for c in 0..s.c {
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for n in 0..s.n {
            for (&g, &h) in grad_out.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                sum_g += g as f64;
                sum_gx += (g * h) as f64;
            }
        }
        dbeta[c] = sum_g as f32;
        dgamma[c] = sum_gx as f32;
        let k = params.gamma[c] * cache.inv_std[c] / m as f32;
        let (mg, mgx) = (sum_g as f32, sum_gx as f32);
        for n in 0..s.n {
            let h = cache.x_hat.plane(n, c);
            let g = grad_out.plane(n, c);
            for ((o, &gv), &hv) in gx.plane_mut(n, c).iter_mut().zip(g).zip(h) {
                *o = k * (m as f32 * gv - mg - hv * mgx);
            }
        }
    }
    Ok((gx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> Tensor<f32> {
        Tensor::from_vec(shape, (0..shape.numel()).map(|i| ((i * 37) % 23) as f32 * 0.3 - 2.0).collect()).unwrap()
    }

    #[test]
    fn eval_identity() {
        let x = ramp(Shape::new(2, 3, 4, 4));
        let y = batchnorm(&x, &BatchNormParams::identity(3)).unwrap();
        assert!(x.max_abs_diff(&y) <= 1e-5 * 3.0);
    }

    #[test]
    fn train_mode_normalizes() {
        let x = ramp(Shape::new(2, 3, 5, 5));
        let (y, cache) = batchnorm_train(&x, &BatchNormParams::identity(3)).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.plane(n, c).iter().map(|&v| v as f64).collect::<Vec<_>>()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
        assert_eq!(cache.count, 50);
    }

    #[test]
    fn channel_mismatch_and_bad_params() {
        let x = ramp(Shape::new(1, 2, 2, 2));
        assert!(batchnorm(&x, &BatchNormParams::identity(3)).is_err());
        let mut p = BatchNormParams::identity(2);
        p.running_var[0] = -1.0;
        assert!(batchnorm(&x, &p).is_err());
        let mut p = BatchNormParams::identity(2);
        p.eps = 0.0;
        assert!(batchnorm(&x, &p).is_err());
    }

    #[test]
    fn running_update_moves_towards_batch() {
        let mut p = BatchNormParams::identity(1);
        p.update_running(&[1.0], &[3.0], 4);
        assert!((p.running_mean[0] - 0.1).abs() < 1e-7);
        assert!((p.running_var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-6);
    }
}
