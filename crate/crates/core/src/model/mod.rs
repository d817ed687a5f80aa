//! The eight-layer encoder-decoder segmentation network.
//!
//! Layers 1-3 encode (ConvBlock then 2x2 max pool), layer 4 is the bottleneck,
//! layers 5-7 decode (max unpool with the matching encoder indices, add the
//! encoder skip, then ConvBlock) and layer 8 is a 3x3 convolution producing one
//! logit map. Skip connections are elementwise sums, so the channel widths
//! mirror each other around the bottleneck.

mod forward;
pub mod qsm;

pub use forward::{BlockPoint, Site};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormParams, ConvParams, Shape, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Encoder,
    Intermediate,
    Decoder,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    ConvblockPool,
    Convblock,
    UnpoolConvblock,
    ConvHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: u8,
    pub location: Location,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    /// Whether the block output is added to its own input (layers 4 and 7).
    pub residual: bool,
}

/// Channel configuration. Topology is fixed; only widths vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { in_channels: 3, widths: [16, 32, 64] }
    }
}

impl ModelConfig {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        use LayerKind::*;
        use Location::*;
        let [a, b, c] = self.widths;
        let rows = [
            (Encoder, ConvblockPool, self.in_channels, a, false),
            (Encoder, ConvblockPool, a, b, false),
            (Encoder, ConvblockPool, b, c, false),
            (Intermediate, Convblock, c, c, true),
            (Decoder, UnpoolConvblock, c, b, false),
            (Decoder, UnpoolConvblock, b, a, false),
            (Decoder, UnpoolConvblock, a, a, true),
            (Head, ConvHead, a, 1, false),
        ];
        rows.iter()
            .enumerate()
            .map(|(i, &(location, kind, c_in, c_out, residual))| LayerSpec {
                index: i as u8 + 1,
                location,
                kind,
                c_in,
                c_out,
                residual,
            })
            .collect()
    }
}

/// Multiply-accumulates of one forward pass, from the layer table alone.
pub fn mac_count_specs(specs: &[LayerSpec], h: usize, w: usize) -> Result<u64> {
    validate_specs(specs)?;
    check_input_hw(h, w)?;
    let mut total = 0u64;
    for s in specs {
        // Resolution each layer's convolutions run at.
        let div = [1, 2, 4, 8, 4, 2, 1, 1][s.index as usize - 1];
        let hw = ((h / div) * (w / div)) as u64;
        let (ci, co) = (s.c_in as u64, s.c_out as u64);
        total += hw
            * match s.kind {
                LayerKind::ConvHead => 9 * ci * co,
                _ => 9 * ci * co + co * co + 9 * co,
            };
    }
    Ok(total)
}

/// Checks that every additive skip joins tensors of equal channel count.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.len() != 8 {
        return Err(Error::invalid(format!("expected 8 layers, found {}", specs.len())));
    }
    for pair in specs.windows(2) {
        if pair[0].c_out != pair[1].c_in {
            return Err(Error::shape(format!(
                "layer {} emits {} channels but layer {} consumes {}",
                pair[0].index, pair[0].c_out, pair[1].index, pair[1].c_in
            )));
        }
    }
    // (encoder layer, decoder layer whose unpooled input meets it)
    for (enc, dec) in [(3usize, 5usize), (2, 6), (1, 7)] {
        if specs[enc - 1].c_out != specs[dec - 1].c_in {
            return Err(Error::shape(format!(
                "skip from layer {enc} ({} ch) cannot join layer {dec} input ({} ch)",
                specs[enc - 1].c_out,
                specs[dec - 1].c_in
            )));
        }
    }
    for s in specs.iter().filter(|s| s.residual) {
        if s.c_in != s.c_out {
            return Err(Error::shape(format!("residual layer {} changes width", s.index)));
        }
    }
    if specs[7].c_out != 1 {
        return Err(Error::shape("head must emit a single map"));
    }
    Ok(())
}

/// 3x3 conv + BN + ReLU, then 1x1 conv, depthwise 3x3 + BN + ReLU, with an
/// inner residual joining the two halves. BN slots are `None` once folded.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub conv3x3: ConvParams,
    pub bn1: Option<BatchNormParams>,
    pub conv1x1: ConvParams,
    pub dw3x3: ConvParams,
    pub bn2: Option<BatchNormParams>,
}

impl ConvBlockParams {
    pub fn c_out(&self) -> usize {
        self.conv3x3.c_out()
    }

    pub fn num_params(&self) -> usize {
        let bn = |b: &Option<BatchNormParams>| b.as_ref().map_or(0, |b| 2 * b.channels());
        self.conv3x3.num_params() + bn(&self.bn1) + self.conv1x1.num_params() + self.dw3x3.num_params() + bn(&self.bn2)
    }

    pub fn is_folded(&self) -> bool {
        self.bn1.is_none() && self.bn2.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub config: ModelConfig,
    pub specs: Vec<LayerSpec>,
    /// Layers 1-7.
    pub blocks: Vec<ConvBlockParams>,
    /// Layer 8.
    pub head: ConvParams,
}

fn uniform_conv(rng: &mut ChaCha8Rng, c_out: usize, c_in_per_group: usize, k: usize, groups: usize, pad: usize, bias: bool) -> ConvParams {
    let fan_in = (c_in_per_group * k * k) as f32;
    let bound = (6.0 / fan_in).sqrt();
    let shape = Shape::new(c_out, c_in_per_group, k, k);
    let w = (0..shape.numel()).map(|_| rng.random_range(-bound..bound)).collect();
    ConvParams {
        weight: Tensor::from_vec(shape, w).expect("sized by construction"),
        bias: bias.then(|| vec![0.0; c_out]),
        stride: 1,
        padding: pad,
        groups,
    }
}

/// Builds the default network with fan-in scaled uniform weights.
pub fn build_model(seed: u64) -> ModelGraph {
    build_model_with(ModelConfig::default(), seed).expect("default configuration is valid")
}

/// Weights are drawn uniformly from `±sqrt(6 / fan_in)`; biases start at 0, BN
/// at the identity. The depthwise convolution carries no bias (BN follows it).
pub fn build_model_with(config: ModelConfig, seed: u64) -> Result<ModelGraph> {
    if config.in_channels == 0 || config.widths.contains(&0) {
        return Err(Error::invalid("channel counts must be positive"));
    }
    let specs = config.layer_specs();
    validate_specs(&specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = specs[..7]
        .iter()
        .map(|s| ConvBlockParams {
            conv3x3: uniform_conv(&mut rng, s.c_out, s.c_in, 3, 1, 1, true),
            bn1: Some(BatchNormParams::identity(s.c_out)),
            conv1x1: uniform_conv(&mut rng, s.c_out, s.c_out, 1, 1, 0, true),
            dw3x3: uniform_conv(&mut rng, s.c_out, 1, 3, s.c_out, 1, false),
            bn2: Some(BatchNormParams::identity(s.c_out)),
        })
        .collect();
    let head = uniform_conv(&mut rng, 1, specs[7].c_in, 3, 1, 1, true);
    Ok(ModelGraph { config, specs, blocks, head })
}

impl ModelGraph {
    /// Trainable scalars: conv weights and biases plus BN gamma/beta.
    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(ConvBlockParams::num_params).sum::<usize>() + self.head.num_params()
    }

    pub fn is_folded(&self) -> bool {
        self.blocks.iter().all(ConvBlockParams::is_folded)
    }

    pub fn validate(&self) -> Result<()> {
        validate_specs(&self.specs)?;
        if self.specs != self.config.layer_specs() {
            return Err(Error::invalid("layer specs disagree with the model configuration"));
        }
        if self.blocks.len() != 7 {
            return Err(Error::invalid(format!("expected 7 blocks, found {}", self.blocks.len())));
        }
        for (s, b) in self.specs.iter().zip(&self.blocks) {
            let convs = [(&b.conv3x3, s.c_in, 3, 1), (&b.conv1x1, s.c_out, 1, 1), (&b.dw3x3, s.c_out, 3, s.c_out)];
            for (conv, c_in, k, groups) in convs {
                conv.validate()?;
                if conv.c_in() != c_in || conv.c_out() != s.c_out || conv.kernel() != k || conv.groups != groups || conv.stride != 1 || conv.padding != k / 2 {
                    return Err(Error::shape(format!("layer {} convolution does not match its spec", s.index)));
                }
            }
            for bn in [&b.bn1, &b.bn2].into_iter().flatten() {
                bn.validate()?;
                if bn.channels() != s.c_out {
                    return Err(Error::shape(format!("layer {} batchnorm width", s.index)));
                }
            }
        }
        self.head.validate()?;
        if self.head.c_in() != self.specs[7].c_in || self.head.c_out() != 1 || self.head.kernel() != 3 || self.head.padding != 1 {
            return Err(Error::shape("head convolution does not match its spec"));
        }
        Ok(())
    }

    /// Every float parameter tensor, in a fixed order, with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, Vec<f32>)> {
        let mut v = Vec::new();
        self.visit_tensors(&mut |name, data: &[f32]| v.push((name.to_string(), data.to_vec())));
        v
    }

    fn visit_tensors(&self, f: &mut dyn FnMut(&str, &[f32])) {
        for (i, b) in self.blocks.iter().enumerate() {
            let l = i + 1;
            for (cname, conv) in [("conv3x3", &b.conv3x3), ("conv1x1", &b.conv1x1), ("dw3x3", &b.dw3x3)] {
                f(&format!("b{l}.{cname}.weight"), conv.weight.data());
                if let Some(bias) = &conv.bias {
                    f(&format!("b{l}.{cname}.bias"), bias);
                }
            }
            for (bname, bn) in [("bn1", &b.bn1), ("bn2", &b.bn2)] {
                if let Some(bn) = bn {
                    f(&format!("b{l}.{bname}.gamma"), &bn.gamma);
                    f(&format!("b{l}.{bname}.beta"), &bn.beta);
                    f(&format!("b{l}.{bname}.running_mean"), &bn.running_mean);
                    f(&format!("b{l}.{bname}.running_var"), &bn.running_var);
                }
            }
        }
        f("head.weight", self.head.weight.data());
        if let Some(bias) = &self.head.bias {
            f("head.bias", bias);
        }
    }

    /// Mutable views of the trainable parameters (no BN running statistics),
    /// in the same order gradients are reported.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut v: Vec<(String, &mut [f32])> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let l = i + 1;
            let ConvBlockParams { conv3x3, bn1, conv1x1, dw3x3, bn2 } = b;
            push_conv(&mut v, format!("b{l}.conv3x3"), conv3x3);
            push_bn(&mut v, format!("b{l}.bn1"), bn1);
            push_conv(&mut v, format!("b{l}.conv1x1"), conv1x1);
            push_conv(&mut v, format!("b{l}.dw3x3"), dw3x3);
            push_bn(&mut v, format!("b{l}.bn2"), bn2);
        }
        push_conv(&mut v, "head".to_string(), &mut self.head);
        v
    }

    /// Output shape of every layer for an `h x w` input (batch 1).
    pub fn layer_output_shapes(&self, h: usize, w: usize) -> Vec<Shape> {
        let res = [(h, w), (h / 2, w / 2), (h / 4, w / 4), (h / 8, w / 8), (h / 4, w / 4), (h / 2, w / 2), (h, w), (h, w)];
        self.specs.iter().zip(res).map(|(s, (rh, rw))| Shape::new(1, s.c_out, rh, rw)).collect()
    }

    /// Multiply-accumulates of one forward pass over an `h x w` input.
    pub fn mac_count(&self, h: usize, w: usize) -> Result<u64> {
        check_input_hw(h, w)?;
        // Resolution each block's convolutions run at.
        let res = [(h, w), (h / 2, w / 2), (h / 4, w / 4), (h / 8, w / 8), (h / 4, w / 4), (h / 2, w / 2), (h, w)];
        let mut total = 0;
        for (b, (rh, rw)) in self.blocks.iter().zip(res) {
            total += b.conv3x3.macs(rh, rw)? + b.conv1x1.macs(rh, rw)? + b.dw3x3.macs(rh, rw)?;
        }
        Ok(total + self.head.macs(h, w)?)
    }
}

fn push_conv<'a>(v: &mut Vec<(String, &'a mut [f32])>, name: String, conv: &'a mut ConvParams) {
    v.push((format!("{name}.weight"), conv.weight.data_mut()));
    if let Some(b) = conv.bias.as_mut() {
        v.push((format!("{name}.bias"), b.as_mut_slice()));
    }
}

fn push_bn<'a>(v: &mut Vec<(String, &'a mut [f32])>, name: String, bn: &'a mut Option<BatchNormParams>) {
    if let Some(bn) = bn.as_mut() {
        v.push((format!("{name}.gamma"), bn.gamma.as_mut_slice()));
        v.push((format!("{name}.beta"), bn.beta.as_mut_slice()));
    }
}

pub(crate) fn check_input_hw(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::shape(format!("input {h}x{w} must be non-empty and divisible by 8")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_chain_matches_layer_table() {
        let m = build_model(0);
        let chain: Vec<(usize, usize)> = m.specs.iter().map(|s| (s.c_in, s.c_out)).collect();
        assert_eq!(chain, vec![(3, 16), (16, 32), (32, 64), (64, 64), (64, 32), (32, 16), (16, 16), (16, 1)]);
        assert_eq!(m.specs.len(), 8);
        assert!(m.specs[3].residual && m.specs[6].residual);
        m.validate().unwrap();
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(build_model(11), build_model(11));
        assert_ne!(build_model(11), build_model(12));
    }

    #[test]
    fn parameter_count_in_budget() {
        let n = build_model(0).parameter_count();
        assert!((94_000..=114_000).contains(&n), "{n}");
    }

    #[test]
    fn trainable_views_cover_count() {
        let mut m = build_model(0);
        let n = m.parameter_count();
        let total: usize = m.trainable_mut().iter().map(|(_, s)| s.len()).sum();
        assert_eq!(total, n);
    }

    #[test]
    fn broken_skip_is_rejected() {
        let mut specs = ModelConfig::default().layer_specs();
        specs[2].c_out = 48;
        specs[3].c_in = 48;
        assert!(validate_specs(&specs).is_err());
        assert!(build_model_with(ModelConfig { in_channels: 3, widths: [0, 1, 2] }, 0).is_err());
    }
}
