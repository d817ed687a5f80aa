use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Bounds on the vessel pixel fraction of every generated mask.
pub const SYNTH_FG_MIN: f64 = 0.02;
pub const SYNTH_FG_MAX: f64 = 0.30;

const NOISE_SIGMA: f32 = 0.03;
const VESSEL_CONTRAST: f32 = 0.35;

struct Stroke {
    y: f64,
    x: f64,
    heading: f64,
    width: f64,
    length: f64,
    depth: u32,
}

/// Generates `count` fundus-like samples: branching smooth curves of width
/// 1-4 px drawn dark on a slowly varying bright background, with Gaussian
/// noise. Sample `i` depends only on `(seed, i)`.
pub fn synth_vessels(seed: u64, count: usize, hw: (usize, usize)) -> Result<Vec<Sample>> {
    let (h, w) = hw;
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!("synthetic size {h}x{w} must be positive multiples of 8")));
    }
    (0..count).map(|i| one(seed, i as u64, h, w)).collect()
}

fn one(seed: u64, index: u64, h: usize, w: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mask = vessel_mask(&mut rng, h, w);
    let image = render(&mut rng, &mask, h, w);
    Sample::new(image, mask, format!("synth{seed}_{index:03}"))
}

fn vessel_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let mut mask = Tensor::zeros(Shape::new(1, 1, h, w));
    let target = rng.random_range(0.06..0.15);
    let area = (h * w) as f64;
    let span = h.max(w) as f64;
    let mut covered = 0usize;
    for _ in 0..256 {
        if covered as f64 / area >= target {
            break;
        }
        // Trunks enter from a random border point heading inwards.
        let (y, x, heading) = match rng.random_range(0..4) {
            0 => (0.0, rng.random_range(0.0..w as f64), std::f64::consts::FRAC_PI_2),
            1 => (h as f64 - 1.0, rng.random_range(0.0..w as f64), -std::f64::consts::FRAC_PI_2),
            2 => (rng.random_range(0.0..h as f64), 0.0, 0.0),
            _ => (rng.random_range(0.0..h as f64), w as f64 - 1.0, std::f64::consts::PI),
        };
        let heading = heading + rng.random_range(-0.6..0.6);
        let width = rng.random_range(2.0..4.0);
        let mut stack = vec![Stroke { y, x, heading, width, length: span * rng.random_range(0.5..1.0), depth: 0 }];
        while let Some(s) = stack.pop() {
            covered += draw_stroke(rng, &mut mask, s, &mut stack, area * SYNTH_FG_MAX - covered as f64);
        }
    }
    mask
}

/// Walks a stroke with a slowly drifting heading, stamping discs and
/// occasionally spawning thinner branches. Returns newly covered pixels.
fn draw_stroke(rng: &mut ChaCha8Rng, mask: &mut Tensor<f32>, s: Stroke, stack: &mut Vec<Stroke>, budget: f64) -> usize {
    let Shape { h, w, .. } = mask.shape();
    let (mut y, mut x, mut heading) = (s.y, s.x, s.heading);
    let mut curvature = 0.0;
    let mut added = 0usize;
    let step = 0.5;
    let r = (s.width / 2.0).max(0.75);
    let mut t = 0.0;
    while t < s.length {
        curvature = 0.9 * curvature + rng.random_range(-0.02..0.02);
        heading += curvature;
        y += step * heading.sin();
        x += step * heading.cos();
        if y < -r || x < -r || y > h as f64 + r || x > w as f64 + r {
            break;
        }
        added += stamp(mask, y, x, r);
        if added as f64 >= budget {
            break;
        }
        t += step;
        if s.depth < 2 && s.width > 1.2 && rng.random_bool(0.012) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            stack.push(Stroke {
                y,
                x,
                heading: heading + side * rng.random_range(0.4..1.1),
                width: (s.width * rng.random_range(0.5..0.8)).max(1.0),
                length: (s.length - t) * rng.random_range(0.3..0.7),
                depth: s.depth + 1,
            });
        }
    }
    added
}

/// Marks pixels whose centers lie within `r` of `(y, x)`.
fn stamp(mask: &mut Tensor<f32>, y: f64, x: f64, r: f64) -> usize {
    let Shape { h, w, .. } = mask.shape();
    let plane = mask.plane_mut(0, 0);
    let mut added = 0;
    let y0 = (y - r - 0.5).floor().max(0.0) as usize;
    let x0 = (x - r - 0.5).floor().max(0.0) as usize;
    let y1 = ((y + r + 0.5).ceil() as usize).min(h);
    let x1 = ((x + r + 0.5).ceil() as usize).min(w);
    for py in y0..y1 {
        for px in x0..x1 {
            let (dy, dx) = (py as f64 + 0.5 - y, px as f64 + 0.5 - x);
            if dy * dy + dx * dx <= r * r && plane[py * w + px] == 0.0 {
                plane[py * w + px] = 1.0;
                added += 1;
            }
        }
    }
    added
}

fn render(rng: &mut ChaCha8Rng, mask: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    // Background: a few low-frequency waves around mid-grey.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..2.0) / h as f64,
                rng.random_range(0.5..2.0) / w as f64,
            )
        })
        .collect();
    let base = rng.random_range(0.55..0.7);
    let tint = [rng.random_range(0.9..1.0), 1.0, rng.random_range(0.6..0.8)];
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
    let m = mask.plane(0, 0);
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            let bg: f64 = base
                + waves
                    .iter()
                    .map(|&(a, ph, fy, fx)| a * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + ph).sin())
                    .sum::<f64>();
            let v = bg as f32 - VESSEL_CONTRAST * m[y * w + x];
            let n = noise.sample(rng);
            for (c, &k) in tint.iter().enumerate() {
                image.set(0, c, y, x, (k * v + n).clamp(0.0, 1.0));
            }
        }
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = synth_vessels(11, 3, (64, 64)).unwrap();
        let b = synth_vessels(11, 3, (64, 64)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            s.validate().unwrap();
        }
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn prefix_stable() {
        let a = synth_vessels(5, 4, (32, 32)).unwrap();
        let b = synth_vessels(5, 2, (32, 32)).unwrap();
        assert_eq!(&a[..2], &b[..]);
    }

    #[test]
    fn rejects_bad_size() {
        assert!(synth_vessels(0, 1, (30, 32)).is_err());
    }
}
