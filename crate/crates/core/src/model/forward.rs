use std::fmt;

use super::{check_input_hw, ConvBlockParams, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{add, add_assign, batchnorm, conv2d, max_unpool2x2, maxpool2x2, relu, Tensor};

/// Named points inside a ConvBlock where activations are observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockPoint {
    /// After 3x3 conv, BN and ReLU.
    T,
    /// After the 1x1 conv.
    C1,
    /// After depthwise conv, BN and ReLU.
    U,
    /// The inner residual sum `t + u`.
    Out,
    /// The outer residual sum (layers 4 and 7 only).
    Residual,
}

/// Activation sites of the network, the unit of calibration and quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Input,
    Block(u8, BlockPoint),
    /// Decoder join `unpool(..) + encoder feature` feeding layer 5, 6 or 7.
    Skip(u8),
    Head,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Input => f.write_str("input"),
            Site::Block(l, p) => {
                let p = match p {
                    BlockPoint::T => "t",
                    BlockPoint::C1 => "c1",
                    BlockPoint::U => "u",
                    BlockPoint::Out => "out",
                    BlockPoint::Residual => "res",
                };
                write!(f, "b{l}.{p}")
            }
            Site::Skip(l) => write!(f, "skip{l}"),
            Site::Head => f.write_str("head"),
        }
    }
}

impl std::str::FromStr for Site {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unknown activation site `{s}`"));
        match s {
            "input" => return Ok(Site::Input),
            "head" => return Ok(Site::Head),
            _ => {}
        }
        if let Some(l) = s.strip_prefix("skip") {
            return l.parse().map(Site::Skip).map_err(|_| bad());
        }
        let rest = s.strip_prefix('b').ok_or_else(bad)?;
        let (l, p) = rest.split_once('.').ok_or_else(bad)?;
        let l: u8 = l.parse().map_err(|_| bad())?;
        let p = match p {
            "t" => BlockPoint::T,
            "c1" => BlockPoint::C1,
            "u" => BlockPoint::U,
            "out" => BlockPoint::Out,
            "res" => BlockPoint::Residual,
            _ => return Err(bad()),
        };
        Ok(Site::Block(l, p))
    }
}

impl ModelGraph {
    /// All activation sites in execution order.
    pub fn sites(&self) -> Vec<Site> {
        let mut v = vec![Site::Input];
        for s in &self.specs[..7] {
            if matches!(s.index, 5..=7) {
                v.push(Site::Skip(s.index));
            }
            v.extend([BlockPoint::T, BlockPoint::C1, BlockPoint::U, BlockPoint::Out].map(|p| Site::Block(s.index, p)));
            if s.residual {
                v.push(Site::Block(s.index, BlockPoint::Residual));
            }
        }
        v.push(Site::Head);
        v
    }

    pub(crate) fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let s = x.shape();
        if s.c != self.config.in_channels {
            return Err(Error::shape(format!("input has {} channels, model expects {}", s.c, self.config.in_channels)));
        }
        check_input_hw(s.h, s.w)
    }

    /// Float inference (BN in eval mode). Returns logits of shape `(n, 1, h, w)`.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_observed(x, &mut |_, _| {})
    }

    /// [`forward`](Self::forward), reporting every activation site to `observe`.
    pub fn forward_observed(&self, x: &Tensor<f32>, observe: &mut dyn FnMut(Site, &Tensor<f32>)) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        observe(Site::Input, x);
        let b = &self.blocks;
        let (h, w) = (x.shape().h, x.shape().w);

        let e1 = block_eval(&b[0], 1, x, false, observe)?;
        let (p1, i1) = maxpool2x2(&e1)?;
        let e2 = block_eval(&b[1], 2, &p1, false, observe)?;
        let (p2, i2) = maxpool2x2(&e2)?;
        let e3 = block_eval(&b[2], 3, &p2, false, observe)?;
        let (p3, i3) = maxpool2x2(&e3)?;
        let m = block_eval(&b[3], 4, &p3, true, observe)?;

        let s3 = add(&max_unpool2x2(&m, &i3, (h / 4, w / 4))?, &e3)?;
        observe(Site::Skip(5), &s3);
        let d5 = block_eval(&b[4], 5, &s3, false, observe)?;
        let s2 = add(&max_unpool2x2(&d5, &i2, (h / 2, w / 2))?, &e2)?;
        observe(Site::Skip(6), &s2);
        let d6 = block_eval(&b[5], 6, &s2, false, observe)?;
        let s1 = add(&max_unpool2x2(&d6, &i1, (h, w))?, &e1)?;
        observe(Site::Skip(7), &s1);
        let d7 = block_eval(&b[6], 7, &s1, true, observe)?;

        let logits = conv2d(&d7, &self.head)?;
        observe(Site::Head, &logits);
        Ok(logits)
    }
}

fn block_eval(
    p: &ConvBlockParams,
    layer: u8,
    x: &Tensor<f32>,
    residual: bool,
    observe: &mut dyn FnMut(Site, &Tensor<f32>),
) -> Result<Tensor<f32>> {
    let mut a = conv2d(x, &p.conv3x3)?;
    if let Some(bn) = &p.bn1 {
        a = batchnorm(&a, bn)?;
    }
    let t = relu(&a);
    observe(Site::Block(layer, BlockPoint::T), &t);
    let c1 = conv2d(&t, &p.conv1x1)?;
    observe(Site::Block(layer, BlockPoint::C1), &c1);
    let mut d = conv2d(&c1, &p.dw3x3)?;
    if let Some(bn) = &p.bn2 {
        d = batchnorm(&d, bn)?;
    }
    let u = relu(&d);
    observe(Site::Block(layer, BlockPoint::U), &u);
    let mut out = add(&t, &u)?;
    observe(Site::Block(layer, BlockPoint::Out), &out);
    if residual {
        add_assign(&mut out, x)?;
        observe(Site::Block(layer, BlockPoint::Residual), &out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::tensor::Shape;

    fn input(h: usize, w: usize) -> Tensor<f32> {
        let s = Shape::new(1, 3, h, w);
        Tensor::from_vec(s, (0..s.numel()).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect()).unwrap()
    }

    #[test]
    fn resolution_preserved() {
        let m = build_model(1);
        let y = m.forward(&input(64, 64)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 64, 64));
        let y = m.forward(&input(16, 24)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 16, 24));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = build_model(1);
        m.head.weight.data_mut().fill(0.0);
        m.head.bias.as_mut().unwrap().fill(0.0);
        assert!(m.forward(&input(32, 32)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let m = build_model(5);
        let x = input(32, 32);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = build_model(0);
        assert!(m.forward(&input(20, 16)).is_err());
        assert!(m.forward(&Tensor::zeros(Shape::new(1, 1, 16, 16))).is_err());
    }

    #[test]
    fn observer_sees_every_site_once() {
        let m = build_model(0);
        let mut seen = Vec::new();
        m.forward_observed(&input(16, 16), &mut |s, _| seen.push(s)).unwrap();
        let mut expected = m.sites();
        expected.sort();
        seen.sort();
        assert_eq!(seen, expected);
        for s in m.sites() {
            assert_eq!(s.to_string().parse::<Site>().unwrap(), s);
        }
    }
}
