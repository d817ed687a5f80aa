//! The integer-only network: int8 activations and weights, int32 accumulators.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{quantize_symmetric, rshift_round, symmetric_scale, CalibRanges, QParams, Requant};
use crate::error::{Error, Result};
use crate::model::{check_input_hw, validate_specs, BlockPoint, LayerSpec, ModelConfig, ModelGraph, Site};
use crate::tensor::{max_unpool2x2_fill, maxpool2x2, ConvParams, DType, Shape, Tensor};

/// Fractional bits carried through the two rescales of an int8 addition.
const ADD_FRAC_BITS: u32 = 16;

/// An int8 convolution with per-output-channel weight scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QConv {
    /// `(c_out, c_in / groups, k, k)`, symmetric (zero point 0).
    pub weight: Tensor<i8>,
    pub weight_scales: Vec<f32>,
    /// At scale `s_in * weight_scale[oc]`.
    pub bias: Vec<i32>,
    /// Encodes `s_in * weight_scale[oc] / s_out`.
    pub requant: Vec<Requant>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl QConv {
    pub fn from_float(conv: &ConvParams, input: QParams, output: QParams) -> Result<Self> {
        conv.validate()?;
        let c_out = conv.c_out();
        let per_out = conv.weight.len() / c_out;
        let mut weight = Vec::with_capacity(conv.weight.len());
        let mut weight_scales = Vec::with_capacity(c_out);
        let mut bias = Vec::with_capacity(c_out);
        let mut requant = Vec::with_capacity(c_out);
        for oc in 0..c_out {
            let w = &conv.weight.data()[oc * per_out..(oc + 1) * per_out];
            let sw = symmetric_scale(w);
            weight.extend(w.iter().map(|&v| quantize_symmetric(v, sw)));
            let acc_scale = input.scale as f64 * sw as f64;
            let b = conv.bias.as_ref().map_or(0.0, |b| b[oc]) as f64;
            let bq = (b / acc_scale).round();
            if bq.abs() > i32::MAX as f64 / 2.0 {
                return Err(Error::Overflow(format!("bias of output channel {oc} does not fit the accumulator")));
            }
            bias.push(bq as i32);
            requant.push(Requant::from_real(acc_scale / output.scale as f64)?);
            weight_scales.push(sw);
        }
        let q = QConv {
            weight: Tensor::from_vec(conv.weight.shape(), weight)?,
            weight_scales,
            bias,
            requant,
            stride: conv.stride,
            padding: conv.padding,
            groups: conv.groups,
        };
        q.validate()?;
        Ok(q)
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

    /// Structural checks plus a static proof that no accumulator can exceed int32.
    pub fn validate(&self) -> Result<()> {
        let c = self.c_out();
        if self.bias.len() != c || self.requant.len() != c || self.weight_scales.len() != c {
            return Err(Error::shape("quantized convolution vectors disagree with c_out"));
        }
        if self.stride == 0 || self.groups == 0 || c % self.groups != 0 {
            return Err(Error::invalid("quantized convolution geometry"));
        }
        if self.weight_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("weight scales must be positive"));
        }
        if self.weight.data().contains(&-128) {
            return Err(Error::invalid("symmetric weights must lie in [-127, 127]"));
        }
        for r in &self.requant {
            r.validate()?;
        }
        let fan_in = (self.weight.shape().c * self.kernel() * self.kernel()) as i64;
        let bound = 255 * 127 * fan_in + self.bias.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
        if bound > i32::MAX as i64 {
            return Err(Error::Overflow(format!("convolution with fan-in {fan_in} could exceed int32")));
        }
        Ok(())
    }

    /// Integer accumulators `bias + Σ w·(q - in_zero)`; zero padding contributes nothing.
    pub fn accumulate(&self, x: &Tensor<i8>, in_zero: i8) -> Result<Tensor<i32>> {
        let s = x.shape();
        let (ho, wo) = self.output_hw(s)?;
        let c_out = self.c_out();
        let mut out = Tensor::<i32>::zeros(Shape::new(s.n, c_out, ho, wo));
        let plane_out = ho * wo;
        for n in 0..s.n {
            let centered: Vec<i16> = x.sample(n).iter().map(|&q| q as i16 - in_zero as i16).collect();
            out.sample_mut(n).par_chunks_mut(plane_out.max(1)).enumerate().for_each(|(oc, acc)| {
                self.accumulate_channel(&centered, (s.h, s.w), oc, acc, (ho, wo));
            });
        }
        Ok(out)
    }

    /// Convolution followed by requantization into `output`; `relu` clamps at
    /// the output zero point.
    pub fn forward(&self, x: &Tensor<i8>, in_zero: i8, output: QParams, relu: bool) -> Result<Tensor<i8>> {
        let acc = self.accumulate(x, in_zero)?;
        let plane = acc.shape().plane();
        let lo = if relu { output.zero_point } else { -128 };
        let mut out = Tensor::<i8>::zeros(acc.shape());
        out.data_mut()
            .par_chunks_mut(plane.max(1))
            .zip(acc.data().par_chunks(plane.max(1)))
            .enumerate()
            .for_each(|(i, (o, a))| {
                let r = self.requant[i % self.c_out()];
                for (o, &a) in o.iter_mut().zip(a) {
                    let v = (r.scale(a as i64) + output.zero_point as i64).clamp(-128, 127) as i8;
                    *o = v.max(lo);
                }
            });
        Ok(out)
    }

    fn output_hw(&self, s: Shape) -> Result<(usize, usize)> {
        if s.c != self.c_in() {
            return Err(Error::shape(format!("int8 input has {} channels, convolution expects {}", s.c, self.c_in())));
        }
        let k = self.kernel();
        let (hp, wp) = (s.h + 2 * self.padding, s.w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::shape("int8 input smaller than kernel"));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn accumulate_channel(&self, x: &[i16], (h, w): (usize, usize), oc: usize, acc: &mut [i32], (ho, wo): (usize, usize)) {
        let k = self.kernel();
        let cin_g = self.weight.shape().c;
        let cout_g = self.c_out() / self.groups;
        let grp = oc / cout_g;
        let pad = self.padding as isize;
        acc.fill(self.bias[oc]);
        for icg in 0..cin_g {
            let ic = grp * cin_g + icg;
            let xp = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = self.weight.at(oc, icg, ky, kx) as i32;
                    if wv == 0 {
                        continue;
                    }
                    if self.stride == 1 {
                        let dx = kx as isize - pad;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).max(0) as usize).min(wo).max(x0);
                        for oy in 0..ho {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &xp[iy as usize * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            for (a, &v) in acc[oy * wo + x0..oy * wo + x1].iter_mut().zip(src) {
                                *a += wv * v as i32;
                            }
                        }
                    } else {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let iy = (oy * self.stride + ky) as isize - pad;
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                    acc[oy * wo + ox] += wv * xp[iy as usize * w + ix as usize] as i32;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Elementwise int8 addition: both operands are rescaled to the sum site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QAdd {
    pub a: QParams,
    pub b: QParams,
    pub out: QParams,
    pub ra: Requant,
    pub rb: Requant,
}

impl QAdd {
    pub fn new(a: QParams, b: QParams, out: QParams) -> Result<Self> {
        Ok(QAdd {
            a,
            b,
            out,
            ra: Requant::from_real(a.scale as f64 / out.scale as f64)?,
            rb: Requant::from_real(b.scale as f64 / out.scale as f64)?,
        })
    }

    #[inline]
    pub fn apply(&self, qa: i8, qb: i8) -> i8 {
        let va = self.ra.scale(((qa as i64) - self.a.zero_point as i64) << ADD_FRAC_BITS);
        let vb = self.rb.scale(((qb as i64) - self.b.zero_point as i64) << ADD_FRAC_BITS);
        let sum = rshift_round((va + vb) as i128, ADD_FRAC_BITS) as i64;
        (sum + self.out.zero_point as i64).clamp(-128, 127) as i8
    }

    pub fn forward(&self, a: &Tensor<i8>, b: &Tensor<i8>) -> Result<Tensor<i8>> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("int8 add of {} and {}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| self.apply(x, y)).collect();
        Tensor::from_vec(a.shape(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QBlock {
    pub conv3x3: QConv,
    pub conv1x1: QConv,
    pub dw3x3: QConv,
}

/// Operations reported by [`QuantizedModel::forward_traced`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QOp {
    QuantizeInput,
    Conv,
    MaxPool,
    Unpool,
    Add,
    DequantizeHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QTraceEvent {
    pub op: QOp,
    pub site: Site,
    pub input: DType,
    pub output: DType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub specs: Vec<LayerSpec>,
    pub sites: BTreeMap<Site, QParams>,
    pub blocks: Vec<QBlock>,
    pub head: QConv,
    adds: BTreeMap<Site, QAdd>,
}

/// Site whose tensor enters layer `l` (1..=7).
fn block_input_site(l: u8) -> Site {
    match l {
        1 => Site::Input,
        2..=4 => Site::Block(l - 1, BlockPoint::Out),
        _ => Site::Skip(l),
    }
}

fn block_output_site(spec: &LayerSpec) -> Site {
    if spec.residual {
        Site::Block(spec.index, BlockPoint::Residual)
    } else {
        Site::Block(spec.index, BlockPoint::Out)
    }
}

/// `(sum site, operand a site, operand b site)` for every int8 addition.
fn add_sites(specs: &[LayerSpec]) -> Vec<(Site, Site, Site)> {
    let mut v = Vec::new();
    for s in &specs[..7] {
        let l = s.index;
        v.push((Site::Block(l, BlockPoint::Out), Site::Block(l, BlockPoint::T), Site::Block(l, BlockPoint::U)));
        if s.residual {
            v.push((Site::Block(l, BlockPoint::Residual), Site::Block(l, BlockPoint::Out), block_input_site(l)));
        }
    }
    v.push((Site::Skip(5), block_output_site(&specs[3]), Site::Block(3, BlockPoint::Out)));
    v.push((Site::Skip(6), block_output_site(&specs[4]), Site::Block(2, BlockPoint::Out)));
    v.push((Site::Skip(7), block_output_site(&specs[5]), Site::Block(1, BlockPoint::Out)));
    v
}

/// Quantizes a batchnorm-folded float model with calibrated activation ranges.
pub fn quantize_model(model: &ModelGraph, ranges: &CalibRanges) -> Result<QuantizedModel> {
    if !model.is_folded() {
        return Err(Error::invalid("quantization expects a batchnorm-folded model"));
    }
    model.validate()?;
    let mut sites = BTreeMap::new();
    for site in model.sites() {
        let r = ranges
            .get(site)
            .ok_or_else(|| Error::invalid(format!("no calibration range for site `{site}`")))?;
        let (lo, hi) = (r.min_seen.min(0.0), r.max_seen.max(0.0));
        if lo == hi {
            return Err(Error::DegenerateRange(site.to_string()));
        }
        sites.insert(site, QParams::from_range(lo, hi)?);
    }
    let p = |s: Site| sites[&s];
    let blocks = model
        .specs
        .iter()
        .zip(&model.blocks)
        .map(|(spec, b)| {
            let l = spec.index;
            Ok(QBlock {
                conv3x3: QConv::from_float(&b.conv3x3, p(block_input_site(l)), p(Site::Block(l, BlockPoint::T)))?,
                conv1x1: QConv::from_float(&b.conv1x1, p(Site::Block(l, BlockPoint::T)), p(Site::Block(l, BlockPoint::C1)))?,
                dw3x3: QConv::from_float(&b.dw3x3, p(Site::Block(l, BlockPoint::C1)), p(Site::Block(l, BlockPoint::U)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head = QConv::from_float(&model.head, p(block_output_site(&model.specs[6])), p(Site::Head))?;
    QuantizedModel::new(model.config, model.specs.clone(), sites, blocks, head)
}

impl QuantizedModel {
    /// Assembles and validates a quantized network, deriving the fixed-point
    /// addition rescales from the site parameters.
    pub fn new(
        config: ModelConfig,
        specs: Vec<LayerSpec>,
        sites: BTreeMap<Site, QParams>,
        blocks: Vec<QBlock>,
        head: QConv,
    ) -> Result<Self> {
        validate_specs(&specs)?;
        if specs != config.layer_specs() {
            return Err(Error::invalid("layer specs disagree with the model configuration"));
        }
        if blocks.len() != 7 {
            return Err(Error::invalid(format!("expected 7 quantized blocks, found {}", blocks.len())));
        }
        for (spec, b) in specs.iter().zip(&blocks) {
            for (conv, c_in, k) in [(&b.conv3x3, spec.c_in, 3), (&b.conv1x1, spec.c_out, 1), (&b.dw3x3, spec.c_out, 3)] {
                conv.validate()?;
                if conv.c_in() != c_in || conv.c_out() != spec.c_out || conv.kernel() != k {
                    return Err(Error::shape(format!("quantized layer {} does not match its spec", spec.index)));
                }
            }
        }
        head.validate()?;
        if head.c_in() != specs[7].c_in || head.c_out() != 1 {
            return Err(Error::shape("quantized head does not match its spec"));
        }
        for (site, q) in &sites {
            if !(q.scale.is_finite() && q.scale > 0.0) {
                return Err(Error::invalid(format!("site `{site}` has a non-positive scale")));
            }
        }
        let site = |s: Site| sites.get(&s).copied().ok_or_else(|| Error::invalid(format!("missing site `{s}`")));
        let mut adds = BTreeMap::new();
        for (sum, a, b) in add_sites(&specs) {
            adds.insert(sum, QAdd::new(site(a)?, site(b)?, site(sum)?)?);
        }
        for s in [Site::Input, Site::Head] {
            site(s)?;
        }
        for spec in &specs[..7] {
            for pnt in [BlockPoint::T, BlockPoint::C1, BlockPoint::U] {
                site(Site::Block(spec.index, pnt))?;
            }
        }
        Ok(QuantizedModel { config, specs, sites, blocks, head, adds })
    }

    pub fn site(&self, s: Site) -> QParams {
        self.sites[&s]
    }

    /// Integer network on a float input; returns dequantized logits.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_traced(x, &mut |_, _| {})
    }

    /// [`forward`](Self::forward), reporting each op and its int8 output.
    pub fn forward_traced(
        &self,
        x: &Tensor<f32>,
        trace: &mut dyn FnMut(QTraceEvent, Option<&Tensor<i8>>),
    ) -> Result<Tensor<f32>> {
        let s = x.shape();
        if s.c != self.config.in_channels {
            return Err(Error::shape(format!("input has {} channels, model expects {}", s.c, self.config.in_channels)));
        }
        check_input_hw(s.h, s.w)?;
        let (h, w) = (s.h, s.w);
        let ev = |op, site, input, output| QTraceEvent { op, site, input, output };

        let qin = self.site(Site::Input);
        let xq = x.map(|v| qin.quantize(v));
        trace(ev(QOp::QuantizeInput, Site::Input, DType::F32, DType::I8), Some(&xq));

        let e1 = self.block(1, &xq, trace)?;
        let (p1, i1) = self.pool(&e1, Site::Block(1, BlockPoint::Out), trace)?;
        let e2 = self.block(2, &p1, trace)?;
        let (p2, i2) = self.pool(&e2, Site::Block(2, BlockPoint::Out), trace)?;
        let e3 = self.block(3, &p2, trace)?;
        let (p3, i3) = self.pool(&e3, Site::Block(3, BlockPoint::Out), trace)?;
        let m = self.block(4, &p3, trace)?;

        let s3 = self.unpool_add(5, &m, &i3, &e3, (h / 4, w / 4), trace)?;
        let d5 = self.block(5, &s3, trace)?;
        let s2 = self.unpool_add(6, &d5, &i2, &e2, (h / 2, w / 2), trace)?;
        let d6 = self.block(6, &s2, trace)?;
        let s1 = self.unpool_add(7, &d6, &i1, &e1, (h, w), trace)?;
        let d7 = self.block(7, &s1, trace)?;

        // The head's int32 accumulators are dequantized directly, so the
        // logits carry no int8 rounding or clipping.
        let in_q = self.site(block_output_site(&self.specs[6]));
        let acc = self.head.accumulate(&d7, in_q.zero_point)?;
        trace(ev(QOp::Conv, Site::Head, DType::I8, DType::I32), None);
        let plane = acc.shape().plane();
        let mut logits = Tensor::zeros(acc.shape());
        for (i, (o, &a)) in logits.data_mut().iter_mut().zip(acc.data()).enumerate() {
            let oc = (i / plane) % self.head.c_out();
            *o = (a as f64 * in_q.scale as f64 * self.head.weight_scales[oc] as f64) as f32;
        }
        trace(ev(QOp::DequantizeHead, Site::Head, DType::I32, DType::F32), None);
        Ok(logits)
    }

    fn block(&self, l: u8, x: &Tensor<i8>, trace: &mut dyn FnMut(QTraceEvent, Option<&Tensor<i8>>)) -> Result<Tensor<i8>> {
        let b = &self.blocks[l as usize - 1];
        let spec = &self.specs[l as usize - 1];
        let in_site = block_input_site(l);
        let conv = |op_site: Site| QTraceEvent { op: QOp::Conv, site: op_site, input: DType::I8, output: DType::I8 };
        let add = |op_site: Site| QTraceEvent { op: QOp::Add, site: op_site, input: DType::I8, output: DType::I8 };

        let t_site = Site::Block(l, BlockPoint::T);
        let t = b.conv3x3.forward(x, self.site(in_site).zero_point, self.site(t_site), true)?;
        trace(conv(t_site), Some(&t));
        let c1_site = Site::Block(l, BlockPoint::C1);
        let c1 = b.conv1x1.forward(&t, self.site(t_site).zero_point, self.site(c1_site), false)?;
        trace(conv(c1_site), Some(&c1));
        let u_site = Site::Block(l, BlockPoint::U);
        let u = b.dw3x3.forward(&c1, self.site(c1_site).zero_point, self.site(u_site), true)?;
        trace(conv(u_site), Some(&u));
        let out_site = Site::Block(l, BlockPoint::Out);
        let out = self.adds[&out_site].forward(&t, &u)?;
        trace(add(out_site), Some(&out));
        if spec.residual {
            let res_site = Site::Block(l, BlockPoint::Residual);
            let res = self.adds[&res_site].forward(&out, x)?;
            trace(add(res_site), Some(&res));
            return Ok(res);
        }
        Ok(out)
    }

    fn pool(
        &self,
        x: &Tensor<i8>,
        site: Site,
        trace: &mut dyn FnMut(QTraceEvent, Option<&Tensor<i8>>),
    ) -> Result<(Tensor<i8>, Tensor<i32>)> {
        let (p, i) = maxpool2x2(x)?;
        trace(QTraceEvent { op: QOp::MaxPool, site, input: DType::I8, output: DType::I8 }, Some(&p));
        Ok((p, i))
    }

    fn unpool_add(
        &self,
        l: u8,
        deep: &Tensor<i8>,
        indices: &Tensor<i32>,
        skip: &Tensor<i8>,
        hw: (usize, usize),
        trace: &mut dyn FnMut(QTraceEvent, Option<&Tensor<i8>>),
    ) -> Result<Tensor<i8>> {
        let deep_site = block_output_site(&self.specs[l as usize - 2]);
        let up = max_unpool2x2_fill(deep, indices, hw, self.site(deep_site).zero_point)?;
        trace(QTraceEvent { op: QOp::Unpool, site: deep_site, input: DType::I8, output: DType::I8 }, Some(&up));
        let sum = self.adds[&Site::Skip(l)].forward(&up, skip)?;
        trace(QTraceEvent { op: QOp::Add, site: Site::Skip(l), input: DType::I8, output: DType::I8 }, Some(&sum));
        Ok(sum)
    }

    /// Quantized convolutions in execution order with stable names.
    pub fn named_convs(&self) -> Vec<(String, &QConv)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let l = i + 1;
            v.push((format!("b{l}.conv3x3"), &b.conv3x3));
            v.push((format!("b{l}.conv1x1"), &b.conv1x1));
            v.push((format!("b{l}.dw3x3"), &b.dw3x3));
        }
        v.push(("head".to_string(), &self.head));
        v
    }

    /// int8 weights plus int32 biases, in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.named_convs().iter().map(|(_, c)| c.weight.len() + 4 * c.bias.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_of_matching_scales_is_exact() {
        let q = QParams { scale: 0.1, zero_point: -10 };
        let out = QParams { scale: 0.1, zero_point: 0 };
        let add = QAdd::new(q, q, out).unwrap();
        // (5 - -10)*0.1 + (-10 - -10)*0.1 = 1.5 -> 15
        assert_eq!(add.apply(5, -10), 15);
        assert_eq!(add.apply(127, 127), 127);
    }

    #[test]
    fn add_site_table_covers_every_join() {
        let specs = ModelConfig::default().layer_specs();
        let sums: Vec<Site> = add_sites(&specs).into_iter().map(|(s, _, _)| s).collect();
        assert_eq!(sums.len(), 7 + 2 + 3);
        assert!(sums.contains(&Site::Block(4, BlockPoint::Residual)));
        assert!(sums.contains(&Site::Skip(5)));
    }
}
