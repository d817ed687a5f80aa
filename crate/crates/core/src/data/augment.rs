use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::tensor::{Shape, Tensor};

/// Which augmentations are active. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub brightness: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    /// Brightness jitter: factor drawn from `[1 - b, 1 + b]`.
    pub brightness_jitter: f32,
    pub max_rotation_deg: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: true,
            hflip: true,
            vflip: true,
            rotate: true,
            brightness_jitter: 0.2,
            max_rotation_deg: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { brightness: false, hflip: false, vflip: false, rotate: false, ..Self::default() }
    }
}

/// One concrete draw of the augmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub brightness: f32,
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f32,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { brightness: 1.0, hflip: false, vflip: false, angle_deg: 0.0 };

    /// Always consumes four draws so that toggling an augmentation does not
    /// shift the random stream for the others.
    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let b = cfg.brightness_jitter;
        let brightness = rng.random_range(1.0 - b..=1.0 + b);
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let a = cfg.max_rotation_deg;
        let angle_deg = rng.random_range(-a..=a);
        AugmentParams {
            brightness: if cfg.brightness { brightness } else { 1.0 },
            hflip: cfg.hflip && hflip,
            vflip: cfg.vflip && vflip,
            angle_deg: if cfg.rotate { angle_deg } else { 0.0 },
        }
    }
}

pub fn augment<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    augment_with(s, &AugmentParams::draw(cfg, rng))
}

/// Brightness (image only), horizontal flip, vertical flip, then rotation
/// about the center: bilinear for the image, nearest for the mask.
pub fn augment_with(s: &Sample, p: &AugmentParams) -> Sample {
    let mut image = s.image.clone();
    let mut mask = s.mask.clone();
    if p.brightness != 1.0 {
        image.data_mut().iter_mut().for_each(|v| *v = (*v * p.brightness).clamp(0.0, 1.0));
    }
    if p.hflip {
        image = image.flip_horizontal();
        mask = mask.flip_horizontal();
    }
    if p.vflip {
        image = image.flip_vertical();
        mask = mask.flip_vertical();
    }
    if p.angle_deg != 0.0 {
        image = rotate_bilinear(&image, p.angle_deg);
        mask = rotate_nearest(&mask, p.angle_deg);
        mask.data_mut().iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    }
    Sample { image, mask, id: s.id.clone() }
}

/// Source coordinates for output pixel `(y, x)` under a rotation by `deg`
/// counter-clockwise about the image center.
#[inline]
fn source(y: usize, x: usize, cy: f64, cx: f64, cos: f64, sin: f64) -> (f64, f64) {
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
}

fn rotate_with(t: &Tensor<f32>, deg: f32, sample: impl Fn(&[f32], usize, usize, f64, f64) -> f32) -> Tensor<f32> {
    let Shape { n, c, h, w } = t.shape();
    let (sin, cos) = (deg as f64).to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(t.shape());
    for ni in 0..n {
        for ci in 0..c {
            let src = t.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = source(y, x, cy, cx, cos, sin);
                    dst[y * w + x] = sample(src, h, w, sy.clamp(0.0, (h - 1) as f64), sx.clamp(0.0, (w - 1) as f64));
                }
            }
        }
    }
    out
}

/// Bilinear rotation with edge replication outside the frame.
pub fn rotate_bilinear(t: &Tensor<f32>, deg: f32) -> Tensor<f32> {
    rotate_with(t, deg, |src, h, w, sy, sx| {
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let at = |y: usize, x: usize| src[y * w + x] as f64;
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

/// Nearest-neighbour rotation with edge replication outside the frame.
pub fn rotate_nearest(t: &Tensor<f32>, deg: f32) -> Tensor<f32> {
    rotate_with(t, deg, |src, _, w, sy, sx| src[sy.round() as usize * w + sx.round() as usize])
}
