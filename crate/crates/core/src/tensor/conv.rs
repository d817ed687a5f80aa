//! 2-D convolution with zero padding and channel groups.
//!
//! Standard and pointwise convolutions lower to a GEMM (via im2col when the
//! kernel has spatial extent); depthwise stride-1 convolution runs as direct
//! sliding-window accumulation. Every output element is produced by a fixed
//! sequence of operations, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(c_out, c_in / groups, k, k)`.
    pub weight: Tensor<f32>,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(
        weight: Tensor<f32>,
        bias: Option<Vec<f32>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let p = ConvParams { weight, bias, stride, padding, groups };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if self.stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if self.groups == 0 || ws.n % self.groups != 0 {
            return Err(Error::invalid(format!(
                "groups {} does not divide c_out {}",
                self.groups, ws.n
            )));
        }
        if ws.h != ws.w || ws.h == 0 {
            return Err(Error::invalid(format!("kernel must be square and non-empty, got {}x{}", ws.h, ws.w)));
        }
        if let Some(b) = &self.bias {
            if b.len() != ws.n {
                return Err(Error::shape(format!("bias length {} != c_out {}", b.len(), ws.n)));
            }
        }
        Ok(())
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.c_in() && self.groups == self.c_out()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::shape(format!("{h}x{w} input too small for {k}x{k} kernel with padding {}", self.padding)));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    /// Trainable scalar count (weights plus bias when present).
    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Multiply-accumulate count for one sample at the given input size.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (ho, wo) = self.output_hw(h, w)?;
        let k = self.kernel() as u64;
        Ok(k * k * (self.c_in() / self.groups) as u64 * self.c_out() as u64 * (ho * wo) as u64)
    }

    fn check_input(&self, s: Shape) -> Result<(usize, usize)> {
        self.validate()?;
        if s.c != self.c_in() {
            return Err(Error::shape(format!(
                "input has {} channels, convolution expects {}",
                s.c,
                self.c_in()
            )));
        }
        if s.c % self.groups != 0 {
            return Err(Error::invalid(format!("groups {} does not divide c_in {}", self.groups, s.c)));
        }
        self.output_hw(s.h, s.w)
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Option<Tensor<f32>>,
    pub weight: Tensor<f32>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d(input: &Tensor<f32>, params: &ConvParams) -> Result<Tensor<f32>> {
    let s = input.shape();
    let (ho, wo) = params.check_input(s)?;
    let c_out = params.c_out();
    let out_shape = Shape::new(s.n, c_out, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    let in_sample = s.c * s.plane();
    let out_sample = c_out * ho * wo;
    if out_sample == 0 {
        return Ok(out);
    }

    out.data_mut()
        .par_chunks_mut(out_sample)
        .zip(input.data().par_chunks(in_sample.max(1)))
        .for_each(|(o, x)| {
            if params.is_depthwise() && params.stride == 1 {
                depthwise_forward(x, (s.h, s.w), params, o, (ho, wo));
            } else {
                grouped_forward(x, (s.h, s.w), params, o, (ho, wo));
            }
        });
    super::debug_check_finite(&out, "conv2d output");
    Ok(out)
}

/// Naive sliding-window convolution; kept for small-case cross-checks and as the
/// integer kernels' float twin.
pub fn conv2d_reference(input: &Tensor<f32>, params: &ConvParams) -> Result<Tensor<f32>> {
    let s = input.shape();
    let (ho, wo) = params.check_input(s)?;
    let (c_out, k, g) = (params.c_out(), params.kernel(), params.groups);
    let (cin_g, cout_g) = (s.c / g, c_out / g);
    let mut out = Tensor::zeros(Shape::new(s.n, c_out, ho, wo));
    for n in 0..s.n {
        for oc in 0..c_out {
            let grp = oc / cout_g;
            let b = params.bias.as_ref().map_or(0.0, |b| b[oc]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for icg in 0..cin_g {
                        let ic = grp * cin_g + icg;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * params.stride + ky) as isize - params.padding as isize;
                                let ix = (ox * params.stride + kx) as isize - params.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += params.weight.at(oc, icg, ky, kx)
                                    * input.at(n, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, oc, oy, ox, acc + b);
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(
    input: &Tensor<f32>,
    params: &ConvParams,
    grad_out: &Tensor<f32>,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let s = input.shape();
    let (ho, wo) = params.check_input(s)?;
    let c_out = params.c_out();
    let gs = grad_out.shape();
    if gs != Shape::new(s.n, c_out, ho, wo) {
        return Err(Error::shape(format!(
            "grad_out {gs} does not match conv output {}",
            Shape::new(s.n, c_out, ho, wo)
        )));
    }
    let in_sample = s.c * s.plane();
    let out_sample = c_out * ho * wo;
    let wlen = params.weight.len();

    let per_sample: Vec<(Vec<f32>, Option<Vec<f32>>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let x = &input.data()[n * in_sample..(n + 1) * in_sample];
            let g = &grad_out.data()[n * out_sample..(n + 1) * out_sample];
            let mut gw = vec![0.0f32; wlen];
            let mut gx = need_input_grad.then(|| vec![0.0f32; in_sample]);
            if params.is_depthwise() && params.stride == 1 {
                depthwise_backward(x, (s.h, s.w), params, g, (ho, wo), &mut gw, gx.as_deref_mut());
            } else {
                grouped_backward(x, (s.h, s.w), params, g, (ho, wo), &mut gw, gx.as_deref_mut());
            }
            (gw, gx)
        })
        .collect();

    let mut weight = Tensor::zeros(params.weight.shape());
    let mut gin = need_input_grad.then(|| Tensor::zeros(s));
    for (n, (gw, gx)) in per_sample.into_iter().enumerate() {
        for (a, b) in weight.data_mut().iter_mut().zip(&gw) {
            *a += b;
        }
        if let (Some(t), Some(gx)) = (gin.as_mut(), gx) {
            t.sample_mut(n).copy_from_slice(&gx);
        }
    }
    let bias = params.bias.as_ref().map(|_| {
        (0..c_out)
            .map(|oc| {
                let mut acc = 0.0f64;
                for n in 0..s.n {
                    acc += grad_out.plane(n, oc).iter().map(|&v| v as f64).sum::<f64>();
                }
                acc as f32
            })
            .collect()
    });
    Ok(ConvGrads { input: gin, weight, bias })
}

/// `[lo, hi)` range of output columns whose stride-1 tap at offset `off` lands inside `[0, len_in)`.
#[inline]
fn valid_span(off: isize, len_in: usize, len_out: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((len_in as isize - off).max(0) as usize).min(len_out);
    (lo.min(hi), hi)
}

fn depthwise_forward(x: &[f32], (h, w): (usize, usize), p: &ConvParams, out: &mut [f32], (ho, wo): (usize, usize)) {
    let k = p.kernel();
    let pad = p.padding as isize;
    for c in 0..p.c_out() {
        let xp = &x[c * h * w..(c + 1) * h * w];
        let op = &mut out[c * ho * wo..(c + 1) * ho * wo];
        op.fill(p.bias.as_ref().map_or(0.0, |b| b[c]));
        let wk = &p.weight.data()[c * k * k..(c + 1) * k * k];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_span(dy, h, ho);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_span(dx, w, wo);
                let wv = wk[ky * k + kx];
                for oy in y0..y1 {
                    let iy = (oy as isize + dy) as usize;
                    let src = &xp[iy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                    let dst = &mut op[oy * wo + x0..oy * wo + x1];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f32],
    (h, w): (usize, usize),
    p: &ConvParams,
    g: &[f32],
    (ho, wo): (usize, usize),
    gw: &mut [f32],
    mut gx: Option<&mut [f32]>,
) {
    let k = p.kernel();
    let pad = p.padding as isize;
    for c in 0..p.c_out() {
        let xp = &x[c * h * w..(c + 1) * h * w];
        let gp = &g[c * ho * wo..(c + 1) * ho * wo];
        let wk = &p.weight.data()[c * k * k..(c + 1) * k * k];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_span(dy, h, ho);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_span(dx, w, wo);
                let mut acc = 0.0f32;
                for oy in y0..y1 {
                    let iy = (oy as isize + dy) as usize;
                    let src = &xp[iy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                    let gr = &gp[oy * wo + x0..oy * wo + x1];
                    acc += src.iter().zip(gr).map(|(a, b)| a * b).sum::<f32>();
                }
                gw[c * k * k + ky * k + kx] = acc;
                if let Some(gx) = gx.as_deref_mut() {
                    let wv = wk[ky * k + kx];
                    let gxp = &mut gx[c * h * w..(c + 1) * h * w];
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let dst = &mut gxp[iy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        for (d, s) in dst.iter_mut().zip(&gp[oy * wo + x0..oy * wo + x1]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Fills `col` (`(cin_g*k*k) x (ho*wo)`, row-major) with the receptive fields of one group.
fn im2col(
    x: &[f32],
    (h, w): (usize, usize),
    channels: std::ops::Range<usize>,
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    col: &mut [f32],
) {
    let pcols = ho * wo;
    let mut r = 0;
    for c in channels {
        let xp = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[r * pcols..(r + 1) * pcols];
                r += 1;
                if stride == 1 {
                    let dy = ky as isize - pad as isize;
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = valid_span(dx, w, wo);
                    for oy in 0..ho {
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        dst[..x0].fill(0.0);
                        dst[x1..].fill(0.0);
                        let src = &xp[iy as usize * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        dst[x0..x1].copy_from_slice(src);
                    }
                } else {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            row[oy * wo + ox] = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                0.0
                            } else {
                                xp[iy as usize * w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into the input-gradient planes; the adjoint of [`im2col`].
fn col2im(
    col: &[f32],
    (h, w): (usize, usize),
    channels: std::ops::Range<usize>,
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    gx: &mut [f32],
) {
    let pcols = ho * wo;
    let mut r = 0;
    for c in channels {
        let gp = &mut gx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[r * pcols..(r + 1) * pcols];
                r += 1;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gp[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(p: &ConvParams) -> bool {
    p.kernel() == 1 && p.stride == 1 && p.padding == 0
}

fn grouped_forward(x: &[f32], (h, w): (usize, usize), p: &ConvParams, out: &mut [f32], (ho, wo): (usize, usize)) {
    let (k, g) = (p.kernel(), p.groups);
    let (cin_g, cout_g) = (p.c_in() / g, p.c_out() / g);
    let kdim = cin_g * k * k;
    let pcols = ho * wo;
    let mut col = if is_pointwise(p) { Vec::new() } else { vec![0.0f32; kdim * pcols] };
    for grp in 0..g {
        let o = &mut out[grp * cout_g * pcols..(grp + 1) * cout_g * pcols];
        if let Some(b) = &p.bias {
            for (oc, plane) in o.chunks_mut(pcols).enumerate() {
                plane.fill(b[grp * cout_g + oc]);
            }
        }
        let b_mat: &[f32] = if is_pointwise(p) {
            &x[grp * cin_g * h * w..(grp + 1) * cin_g * h * w]
        } else {
            im2col(x, (h, w), grp * cin_g..(grp + 1) * cin_g, k, p.stride, p.padding, (ho, wo), &mut col);
            &col
        };
        let a = &p.weight.data()[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
        let beta = if p.bias.is_some() { 1.0 } else { 0.0 };
        gemm(cout_g, kdim, pcols, a, false, b_mat, false, o, beta);
    }
}

fn grouped_backward(
    x: &[f32],
    (h, w): (usize, usize),
    p: &ConvParams,
    g_out: &[f32],
    (ho, wo): (usize, usize),
    gw: &mut [f32],
    mut gx: Option<&mut [f32]>,
) {
    let (k, g) = (p.kernel(), p.groups);
    let (cin_g, cout_g) = (p.c_in() / g, p.c_out() / g);
    let kdim = cin_g * k * k;
    let pcols = ho * wo;
    let pointwise = is_pointwise(p);
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; kdim * pcols] };
    let mut gcol = if pointwise || gx.is_none() { Vec::new() } else { vec![0.0f32; kdim * pcols] };
    for grp in 0..g {
        let go = &g_out[grp * cout_g * pcols..(grp + 1) * cout_g * pcols];
        let b_mat: &[f32] = if pointwise {
            &x[grp * cin_g * h * w..(grp + 1) * cin_g * h * w]
        } else {
            im2col(x, (h, w), grp * cin_g..(grp + 1) * cin_g, k, p.stride, p.padding, (ho, wo), &mut col);
            &col
        };
        // dW = dY · colᵀ
        let gw_g = &mut gw[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
        gemm(cout_g, pcols, kdim, go, false, b_mat, true, gw_g, 0.0);
        if let Some(gx) = gx.as_deref_mut() {
            let a = &p.weight.data()[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
            if pointwise {
                let dst = &mut gx[grp * cin_g * h * w..(grp + 1) * cin_g * h * w];
                gemm(kdim, cout_g, pcols, a, true, go, false, dst, 0.0);
            } else {
                gemm(kdim, cout_g, pcols, a, true, go, false, &mut gcol, 0.0);
                col2im(&gcol, (h, w), grp * cin_g..(grp + 1) * cin_g, k, p.stride, p.padding, (ho, wo), gx);
            }
        }
    }
}

/// `c (m x n) = op(a) (m x k) · op(b) (k x n) + beta · c`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape) -> Tensor<f32> {
        Tensor::ones(shape)
    }

    #[test]
    fn all_ones_3x3_window_sums() {
        let x = ones(Shape::new(1, 1, 3, 3));
        let p = ConvParams::new(ones(Shape::new(1, 1, 3, 3)), Some(vec![0.0]), 1, 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (yy, xx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, yy, xx), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn unit_pointwise_is_identity() {
        let x = Tensor::from_vec(Shape::new(2, 1, 2, 3), (0..12).map(|v| v as f32 * 0.5 - 2.0).collect()).unwrap();
        let p = ConvParams::new(ones(Shape::new(1, 1, 1, 1)), Some(vec![0.0]), 1, 0, 1).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = ones(Shape::new(1, 3, 4, 4));
        let p = ConvParams::new(ones(Shape::new(2, 2, 3, 3)), None, 1, 1, 1).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
        assert!(ConvParams::new(ones(Shape::new(3, 1, 3, 3)), None, 1, 1, 2).is_err());
        assert!(ConvParams::new(ones(Shape::new(2, 1, 3, 3)), Some(vec![0.0]), 1, 1, 1).is_err());
    }

    #[test]
    fn strided_matches_reference() {
        let x = Tensor::from_vec(Shape::new(1, 2, 5, 6), (0..60).map(|v| ((v * 7) % 11) as f32 - 5.0).collect()).unwrap();
        let w = Tensor::from_vec(Shape::new(3, 2, 3, 3), (0..54).map(|v| ((v * 5) % 7) as f32 * 0.25 - 0.75).collect()).unwrap();
        let p = ConvParams::new(w, Some(vec![0.5, -1.0, 0.0]), 2, 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 3, 3));
        assert!(y.max_abs_diff(&conv2d_reference(&x, &p).unwrap()) < 1e-5);
    }

    #[test]
    fn one_by_one_gradient_closed_form() {
        // y = w*x + b, L = sum(y) => dL/dw = sum(x), dL/db = count, dL/dx = w.
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, -4.0]).unwrap();
        let p = ConvParams::new(Tensor::full(Shape::new(1, 1, 1, 1), 0.5), Some(vec![0.25]), 1, 0, 1).unwrap();
        let g = conv2d_backward(&x, &p, &ones(Shape::new(1, 1, 2, 2)), true).unwrap();
        assert!((g.weight.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.bias.unwrap()[0] - 4.0).abs() < 1e-6);
        assert!(g.input.unwrap().data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}
