//! QSM model container.
//!
//! ```text
//! "QSEG" | version: u32 LE | header_len: u32 LE | header (JSON, UTF-8) | payload
//! ```
//!
//! The header lists layer specs, the tensor table (name, dtype, shape, byte
//! offset into the payload) and, for int8 models, the quantization records.
//! Scales are written as shortest round-trip decimal strings so they parse
//! back to the identical `f32`. Per-channel weight scales, requantization
//! multipliers and shifts are payload vectors next to each conv's weights.
//! Payload tensors are raw little-endian values in table order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvBlockParams, LayerSpec, ModelConfig, ModelGraph, Site, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::quant::{QBlock, QConv, QParams, QuantizedModel, Requant};
use crate::tensor::{BatchNormParams, ConvParams, DType, Element, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"QSEG";

/// A model as stored on disk: float (possibly folded) or int8.
#[derive(Debug, Clone, PartialEq)]
pub enum QsmModel {
    Float(ModelGraph),
    Quantized(QuantizedModel),
}

impl QsmModel {
    pub fn specs(&self) -> &[LayerSpec] {
        match self {
            QsmModel::Float(m) => &m.specs,
            QsmModel::Quantized(m) => &m.specs,
        }
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            QsmModel::Float(m) => m.forward(x),
            QsmModel::Quantized(m) => m.forward(x),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, QsmModel::Quantized(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Float,
    Int8,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnHeader {
    eps: String,
    momentum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SiteRecord {
    site: String,
    scale: String,
    zero_point: i8,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantHeader {
    sites: Vec<SiteRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BnHeader>,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantHeader>,
}

struct PayloadWriter {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter { entries: Vec::new(), bytes: Vec::new() }
    }

    fn push<T: Element>(&mut self, name: &str, shape: Shape, data: &[T]) {
        self.entries.push(TensorEntry { name: name.to_string(), dtype: T::DTYPE, shape: shape.as_array(), offset: self.bytes.len() });
        for &v in data {
            v.to_le_bytes_into(&mut self.bytes);
        }
    }
}

fn fmt_f32(v: f32) -> String {
    format!("{v}")
}

fn parse_f32(s: &str, what: &str) -> Result<f32> {
    s.parse::<f32>().map_err(|_| Error::Format(format!("{what}: `{s}` is not a decimal number")))
}

fn vec_shape(len: usize) -> Shape {
    Shape::new(1, 1, 1, len)
}

fn assemble(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Serializes a float model (BN folded or not).
pub fn float_to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    model.validate()?;
    let mut w = PayloadWriter::new();
    let mut bn_cfg: Option<(f32, f32)> = None;
    for (i, b) in model.blocks.iter().enumerate() {
        let l = i + 1;
        for (cname, conv) in [("conv3x3", &b.conv3x3), ("conv1x1", &b.conv1x1), ("dw3x3", &b.dw3x3)] {
            push_conv_f32(&mut w, &format!("b{l}.{cname}"), conv)?;
        }
        for (bname, bn) in [("bn1", &b.bn1), ("bn2", &b.bn2)] {
            let Some(bn) = bn else { continue };
            match bn_cfg {
                None => bn_cfg = Some((bn.eps, bn.momentum)),
                Some(c) if c != (bn.eps, bn.momentum) => {
                    return Err(Error::Format("all batchnorm layers must share eps and momentum".into()))
                }
                _ => {}
            }
            for (field, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("running_mean", &bn.running_mean), ("running_var", &bn.running_var)] {
                check_finite(v, &format!("b{l}.{bname}.{field}"))?;
                w.push(&format!("b{l}.{bname}.{field}"), vec_shape(v.len()), v);
            }
        }
    }
    push_conv_f32(&mut w, "head", &model.head)?;
    let header = Header {
        kind: Kind::Float,
        config: model.config,
        layers: model.specs.clone(),
        bn: bn_cfg.map(|(eps, momentum)| BnHeader { eps: fmt_f32(eps), momentum: fmt_f32(momentum) }),
        payload_len: w.bytes.len(),
        tensors: w.entries,
        quant: None,
    };
    assemble(&header, &w.bytes)
}

fn check_finite(v: &[f32], name: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn push_conv_f32(w: &mut PayloadWriter, name: &str, conv: &ConvParams) -> Result<()> {
    check_finite(conv.weight.data(), &format!("{name}.weight"))?;
    w.push(&format!("{name}.weight"), conv.weight.shape(), conv.weight.data());
    if let Some(b) = &conv.bias {
        check_finite(b, &format!("{name}.bias"))?;
        w.push(&format!("{name}.bias"), vec_shape(b.len()), b);
    }
    Ok(())
}

pub fn quantized_to_bytes(model: &QuantizedModel) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::new();
    for (name, conv) in model.named_convs() {
        w.push(&format!("{name}.weight"), conv.weight.shape(), conv.weight.data());
        w.push(&format!("{name}.bias"), vec_shape(conv.bias.len()), &conv.bias);
        // Per-channel weight scales and requantization pairs live in the
        // payload; raw f32 bits round-trip exactly.
        w.push(&format!("{name}.weight_scale"), vec_shape(conv.weight_scales.len()), &conv.weight_scales);
        let mult: Vec<i32> = conv.requant.iter().map(|r| r.multiplier).collect();
        let shift: Vec<i8> = conv.requant.iter().map(|r| r.shift as i8).collect();
        w.push(&format!("{name}.multiplier"), vec_shape(mult.len()), &mult);
        w.push(&format!("{name}.shift"), vec_shape(shift.len()), &shift);
    }
    let sites = model
        .sites
        .iter()
        .map(|(s, q)| SiteRecord { site: s.to_string(), scale: fmt_f32(q.scale), zero_point: q.zero_point })
        .collect();
    let header = Header {
        kind: Kind::Int8,
        config: model.config,
        layers: model.specs.clone(),
        bn: None,
        payload_len: w.bytes.len(),
        tensors: w.entries,
        quant: Some(QuantHeader { sites }),
    };
    assemble(&header, &w.bytes)
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, float_to_bytes(model)?)?;
    Ok(())
}

pub fn save_quantized(model: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, quantized_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<QsmModel> {
    from_bytes(&std::fs::read(path)?)
}

struct Payload<'a> {
    bytes: &'a [u8],
    table: BTreeMap<String, &'a TensorEntry>,
}

impl<'a> Payload<'a> {
    fn has(&self, name: &str) -> bool {
        self.table.contains_key(name)
    }

    fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.table.get(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if e.dtype != T::DTYPE {
            return Err(Error::Format(format!("tensor `{name}` has dtype {:?}, expected {:?}", e.dtype, T::DTYPE)));
        }
        let [n, c, h, w] = e.shape;
        let shape = Shape::new(n, c, h, w);
        let size = T::DTYPE.size_of();
        let len = shape.numel().checked_mul(size).ok_or_else(|| Error::Format("tensor too large".into()))?;
        let end = e.offset.checked_add(len).filter(|&end| end <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated payload: tensor `{name}` runs past the end")))?;
        let data = self.bytes[e.offset..end].chunks_exact(size).map(T::from_le_slice).collect();
        Tensor::from_vec(shape, data)
    }

    fn f32_tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let t = self.tensor::<f32>(name)?;
        t.ensure_finite(name)?;
        Ok(t)
    }

    fn vector<T: Element>(&self, name: &str) -> Result<Vec<T>> {
        Ok(self.tensor::<T>(name)?.into_vec())
    }

    fn f32_vector(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.f32_tensor(name)?.into_vec())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<QsmModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes (not a QSM file)".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Format("truncated preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hend = 12usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[12..hend]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &bytes[hend..];
    if payload.len() != header.payload_len {
        return Err(Error::Format(format!(
            "truncated payload: header declares {} bytes, file holds {}",
            header.payload_len,
            payload.len()
        )));
    }
    super::validate_specs(&header.layers)?;
    if header.layers != header.config.layer_specs() {
        return Err(Error::Format("layer table disagrees with the stored configuration".into()));
    }
    let p = Payload { bytes: payload, table: header.tensors.iter().map(|e| (e.name.clone(), e)).collect() };
    match header.kind {
        Kind::Float => load_float(&header, &p).map(QsmModel::Float),
        Kind::Int8 => load_int8(&header, &p).map(QsmModel::Quantized),
    }
}

fn load_float(header: &Header, p: &Payload) -> Result<ModelGraph> {
    let (eps, momentum) = match &header.bn {
        Some(bn) => (parse_f32(&bn.eps, "bn eps")?, parse_f32(&bn.momentum, "bn momentum")?),
        None => (BatchNormParams::DEFAULT_EPS, BatchNormParams::DEFAULT_MOMENTUM),
    };
    let conv = |name: &str, pad: usize, groups: usize| -> Result<ConvParams> {
        let weight = p.f32_tensor(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let bias = if p.has(&bias_name) { Some(p.f32_vector(&bias_name)?) } else { None };
        ConvParams::new(weight, bias, 1, pad, groups)
    };
    let bn = |name: &str| -> Result<Option<BatchNormParams>> {
        if !p.has(&format!("{name}.gamma")) {
            return Ok(None);
        }
        Ok(Some(BatchNormParams {
            gamma: p.f32_vector(&format!("{name}.gamma"))?,
            beta: p.f32_vector(&format!("{name}.beta"))?,
            running_mean: p.f32_vector(&format!("{name}.running_mean"))?,
            running_var: p.f32_vector(&format!("{name}.running_var"))?,
            eps,
            momentum,
        }))
    };
    let blocks = header.layers[..7]
        .iter()
        .map(|s| {
            let l = s.index;
            Ok(ConvBlockParams {
                conv3x3: conv(&format!("b{l}.conv3x3"), 1, 1)?,
                bn1: bn(&format!("b{l}.bn1"))?,
                conv1x1: conv(&format!("b{l}.conv1x1"), 0, 1)?,
                dw3x3: conv(&format!("b{l}.dw3x3"), 1, s.c_out)?,
                bn2: bn(&format!("b{l}.bn2"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = ModelGraph { config: header.config, specs: header.layers.clone(), blocks, head: conv("head", 1, 1)? };
    model.validate()?;
    Ok(model)
}

fn load_int8(header: &Header, p: &Payload) -> Result<QuantizedModel> {
    let q = header.quant.as_ref().ok_or_else(|| Error::Format("int8 model without quantization records".into()))?;
    let mut sites = BTreeMap::new();
    for r in &q.sites {
        let site: Site = r.site.parse()?;
        sites.insert(site, QParams { scale: parse_f32(&r.scale, &r.site)?, zero_point: r.zero_point });
    }
    let conv = |name: &str, pad: usize, groups: usize| -> Result<QConv> {
        let weight_scales = p.f32_vector(&format!("{name}.weight_scale"))?;
        let mult = p.vector::<i32>(&format!("{name}.multiplier"))?;
        let shift = p.vector::<i8>(&format!("{name}.shift"))?;
        if mult.len() != shift.len() {
            return Err(Error::Format(format!("`{name}` has {} multipliers for {} shifts", mult.len(), shift.len())));
        }
        let requant = mult.into_iter().zip(shift).map(|(multiplier, s)| Requant { multiplier, shift: s as i32 }).collect();
        let c = QConv {
            weight: p.tensor::<i8>(&format!("{name}.weight"))?,
            weight_scales,
            bias: p.vector::<i32>(&format!("{name}.bias"))?,
            requant,
            stride: 1,
            padding: pad,
            groups,
        };
        c.validate()?;
        Ok(c)
    };
    let blocks = header.layers[..7]
        .iter()
        .map(|s| {
            let l = s.index;
            Ok(QBlock {
                conv3x3: conv(&format!("b{l}.conv3x3"), 1, 1)?,
                conv1x1: conv(&format!("b{l}.conv1x1"), 0, 1)?,
                dw3x3: conv(&format!("b{l}.dw3x3"), 1, s.c_out)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedModel::new(header.config, header.layers.clone(), sites, blocks, conv("head", 1, 1)?)
}
