//! 2x2 max pooling with recorded argmax indices, its scatter inverse, and
//! stride-1 "same" average pooling.

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Kernel 2, stride 2. `indices` holds the flat `y*w + x` position of each
/// selected maximum inside its `(n, c)` input plane; ties go to the smallest
/// flat index.
pub fn maxpool2x2<T: Element + PartialOrd>(input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<i32>)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2x2 needs even spatial dims, got {}x{}", s.h, s.w)));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut pooled = Tensor::zeros(out_shape);
    let mut indices = Tensor::zeros(out_shape);
    let (ho, wo) = (s.h / 2, s.w / 2);
    for p in 0..s.n * s.c {
        let src = &input.data()[p * s.plane()..(p + 1) * s.plane()];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = (2 * oy) * s.w + 2 * ox;
                let mut best = src[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * s.w + 2 * ox + dx;
                    if src[i] > best {
                        best = src[i];
                        best_i = i;
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                pooled.data_mut()[o] = best;
                indices.data_mut()[o] = best_i as i32;
            }
        }
    }
    Ok((pooled, indices))
}

/// Scatters pooled values back to their recorded positions; zero elsewhere.
pub fn max_unpool2x2<T: Element>(
    pooled: &Tensor<T>,
    indices: &Tensor<i32>,
    out_hw: (usize, usize),
) -> Result<Tensor<T>> {
    max_unpool2x2_fill(pooled, indices, out_hw, T::default())
}

/// As [`max_unpool2x2`], filling uncovered positions with `fill` (the zero point
/// of a quantized tensor).
pub fn max_unpool2x2_fill<T: Element>(
    pooled: &Tensor<T>,
    indices: &Tensor<i32>,
    (h, w): (usize, usize),
    fill: T,
) -> Result<Tensor<T>> {
    let ps = pooled.shape();
    if indices.shape() != ps {
        return Err(Error::shape(format!("indices {} do not match pooled {}", indices.shape(), ps)));
    }
    if (h, w) != (2 * ps.h, 2 * ps.w) {
        return Err(Error::shape(format!("unpool target {h}x{w} is not twice {}x{}", ps.h, ps.w)));
    }
    let mut out = Tensor::full(Shape::new(ps.n, ps.c, h, w), fill);
    let plane = h * w;
    for p in 0..ps.n * ps.c {
        let vals = &pooled.data()[p * ps.plane()..(p + 1) * ps.plane()];
        let idx = &indices.data()[p * ps.plane()..(p + 1) * ps.plane()];
        let dst = &mut out.data_mut()[p * plane..(p + 1) * plane];
        for (&v, &i) in vals.iter().zip(idx) {
            if i < 0 || i as usize >= plane {
                return Err(Error::invalid(format!("unpool index {i} outside a {h}x{w} plane")));
            }
            dst[i as usize] = v;
        }
    }
    Ok(out)
}

/// Gradient of [`maxpool2x2`]: routes each pooled gradient to its argmax.
pub fn maxpool2x2_backward(grad_pooled: &Tensor<f32>, indices: &Tensor<i32>, input_shape: Shape) -> Result<Tensor<f32>> {
    let g = max_unpool2x2(grad_pooled, indices, (input_shape.h, input_shape.w))?;
    if g.shape() != input_shape {
        return Err(Error::shape(format!("pool gradient {} vs input {input_shape}", g.shape())));
    }
    Ok(g)
}

/// Gradient of [`max_unpool2x2`]: gathers from the scattered positions.
pub fn max_unpool2x2_backward(grad_out: &Tensor<f32>, indices: &Tensor<i32>) -> Result<Tensor<f32>> {
    let is = indices.shape();
    let gs = grad_out.shape();
    if (gs.n, gs.c, gs.h, gs.w) != (is.n, is.c, 2 * is.h, 2 * is.w) {
        return Err(Error::shape(format!("unpool gradient {gs} vs indices {is}")));
    }
    let mut out = Tensor::zeros(is);
    for p in 0..is.n * is.c {
        let src = &grad_out.data()[p * gs.plane()..(p + 1) * gs.plane()];
        let idx = &indices.data()[p * is.plane()..(p + 1) * is.plane()];
        let dst = &mut out.data_mut()[p * is.plane()..(p + 1) * is.plane()];
        for (d, &i) in dst.iter_mut().zip(idx) {
            *d = src[i as usize];
        }
    }
    Ok(out)
}

/// Stride-1 average pooling with `(k-1)/2` padding; every output is the mean of
/// the in-bounds elements of its window (the divisor is the in-bounds count).
pub fn avgpool_same(input: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    if k % 2 == 0 {
        return Err(Error::invalid(format!("avgpool_same needs an odd kernel, got {k}")));
    }
    let s = input.shape();
    let r = k / 2;
    let mut out = Tensor::zeros(s);
    let (h, w) = (s.h, s.w);
    let mut row_sums = vec![0.0f64; h * w];
    let mut prefix = vec![0.0f64; h.max(w) + 1];
    for p in 0..s.n * s.c {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        // Horizontal window sums.
        for y in 0..h {
            prefix[0] = 0.0;
            for x in 0..w {
                prefix[x + 1] = prefix[x] + src[y * w + x] as f64;
            }
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r + 1).min(w);
                row_sums[y * w + x] = prefix[hi] - prefix[lo];
            }
        }
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for x in 0..w {
            let cx = ((x + r + 1).min(w) - x.saturating_sub(r)) as f64;
            prefix[0] = 0.0;
            for y in 0..h {
                prefix[y + 1] = prefix[y] + row_sums[y * w + x];
            }
            for y in 0..h {
                let lo = y.saturating_sub(r);
                let hi = (y + r + 1).min(h);
                let count = (hi - lo) as f64 * cx;
                dst[y * w + x] = ((prefix[hi] - prefix[lo]) / count) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_picks_max_and_flat_index() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (p, i) = maxpool2x2(&x).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(i.data(), &[3]);
        let u = max_unpool2x2(&p, &i, (2, 2)).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn constant_plane_ties_go_to_top_left() {
        let x = Tensor::full(Shape::new(1, 2, 4, 4), 7.0f32);
        let (p, i) = maxpool2x2(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 7.0));
        for c in 0..2 {
            assert_eq!(i.plane(0, c), &[0, 2, 8, 10]);
        }
    }

    #[test]
    fn pool_errors() {
        assert!(maxpool2x2(&Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4))).is_err());
        let p = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        let bad = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![4]).unwrap();
        assert!(max_unpool2x2(&p, &bad, (2, 2)).is_err());
        let idx = Tensor::<i32>::zeros(Shape::new(1, 1, 1, 1));
        assert!(max_unpool2x2(&p, &idx, (4, 2)).is_err());
        assert!(max_unpool2x2(&p, &Tensor::<i32>::zeros(Shape::new(1, 2, 1, 1)), (2, 2)).is_err());
    }

    #[test]
    fn int8_pool_and_fill() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![-5i8, 3, 3, -128]).unwrap();
        let (p, i) = maxpool2x2(&x).unwrap();
        assert_eq!((p.data()[0], i.data()[0]), (3, 1));
        let u = max_unpool2x2_fill(&p, &i, (2, 2), -128i8).unwrap();
        assert_eq!(u.data(), &[-128, 3, -128, -128]);
    }

    #[test]
    fn avgpool_constant_and_zero() {
        let x = Tensor::full(Shape::new(1, 1, 9, 7), 1.0f32);
        assert!(avgpool_same(&x, 31).unwrap().data().iter().all(|&v| v == 1.0));
        let z = Tensor::<f32>::zeros(Shape::new(2, 1, 5, 5));
        assert!(avgpool_same(&z, 3).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(avgpool_same(&z, 4).is_err());
    }

    #[test]
    fn avgpool_border_uses_valid_count() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = avgpool_same(&x, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-7));
    }
}
