use crate::error::{Error, Result};
use crate::model::{ConvBlockParams, ModelGraph};
use crate::tensor::{
    add, add_assign, batchnorm_train, batchnorm_train_backward, conv2d, conv2d_backward, max_unpool2x2,
    max_unpool2x2_backward, maxpool2x2, maxpool2x2_backward, relu, relu_backward_in_place, BnTrainCache, ConvParams,
    Shape, Tensor,
};

/// Activations one block keeps for its backward pass.
#[derive(Debug, Clone)]
struct BlockTrace {
    input: Tensor<f32>,
    t: Tensor<f32>,
    c1: Tensor<f32>,
    u: Tensor<f32>,
    bn1: Option<BnTrainCache>,
    bn2: Option<BnTrainCache>,
    residual: bool,
}

/// Everything the reverse pass needs from one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    blocks: Vec<BlockTrace>,
    /// Pooling argmax indices after layers 1-3.
    indices: [Tensor<i32>; 3],
    /// Shapes of the pooled encoder outputs e1-e3.
    encoder: [Shape; 3],
    head_input: Tensor<f32>,
}

impl ForwardTrace {
    /// Argmax indices of the three pooling stages. Unpooling routes values
    /// through them, so the network is discontinuous wherever they change.
    pub fn pool_indices(&self) -> &[Tensor<i32>; 3] {
        &self.indices
    }

    /// True when both passes took the same pooling argmaxes and the same
    /// ReLU activity pattern, i.e. lie on the same smooth piece of the
    /// network function.
    pub fn same_piece(&self, other: &ForwardTrace) -> bool {
        let active = |t: &Tensor<f32>, o: &Tensor<f32>| t.data().iter().zip(o.data()).all(|(a, b)| (*a > 0.0) == (*b > 0.0));
        self.indices == other.indices
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| active(&a.t, &b.t) && active(&a.u, &b.u))
    }

    /// Batch statistics of every train-mode normalization, in block order
    /// `(layer index 1-7, which 1|2, cache)`.
    pub fn bn_caches(&self) -> impl Iterator<Item = (usize, u8, &BnTrainCache)> {
        self.blocks.iter().enumerate().flat_map(|(i, b)| {
            [(1u8, &b.bn1), (2u8, &b.bn2)].into_iter().filter_map(move |(k, c)| c.as_ref().map(|c| (i + 1, k, c)))
        })
    }
}

/// Gradients of every trainable tensor, named and ordered exactly as
/// [`ModelGraph::trainable_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entries: Vec<(String, Vec<f32>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.iter().flat_map(|(_, g)| g).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// Training-mode forward pass (batch statistics in every normalization),
/// returning logits and the trace for [`backward`].
pub fn forward_train(model: &ModelGraph, x: &Tensor<f32>) -> Result<(Tensor<f32>, ForwardTrace)> {
    model.check_input(x)?;
    let b = &model.blocks;
    let (h, w) = (x.shape().h, x.shape().w);
    let mut traces = Vec::with_capacity(7);

    let e1 = block_forward(&b[0], x, false, &mut traces)?;
    let (p1, i1) = maxpool2x2(&e1)?;
    let e2 = block_forward(&b[1], &p1, false, &mut traces)?;
    let (p2, i2) = maxpool2x2(&e2)?;
    let e3 = block_forward(&b[2], &p2, false, &mut traces)?;
    let (p3, i3) = maxpool2x2(&e3)?;
    let m = block_forward(&b[3], &p3, true, &mut traces)?;

    let s3 = add(&max_unpool2x2(&m, &i3, (h / 4, w / 4))?, &e3)?;
    let d5 = block_forward(&b[4], &s3, false, &mut traces)?;
    let s2 = add(&max_unpool2x2(&d5, &i2, (h / 2, w / 2))?, &e2)?;
    let d6 = block_forward(&b[5], &s2, false, &mut traces)?;
    let s1 = add(&max_unpool2x2(&d6, &i1, (h, w))?, &e1)?;
    let d7 = block_forward(&b[6], &s1, true, &mut traces)?;

    let logits = conv2d(&d7, &model.head)?;
    let trace = ForwardTrace {
        blocks: traces,
        indices: [i1, i2, i3],
        encoder: [e1.shape(), e2.shape(), e3.shape()],
        head_input: d7,
    };
    Ok((logits, trace))
}

fn conv_bn_relu(
    x: &Tensor<f32>,
    conv: &ConvParams,
    bn: &Option<crate::tensor::BatchNormParams>,
) -> Result<(Tensor<f32>, Option<BnTrainCache>)> {
    let a = conv2d(x, conv)?;
    match bn {
        Some(bn) => {
            let (y, cache) = batchnorm_train(&a, bn)?;
            Ok((relu(&y), Some(cache)))
        }
        None => Ok((relu(&a), None)),
    }
}

fn block_forward(p: &ConvBlockParams, x: &Tensor<f32>, residual: bool, traces: &mut Vec<BlockTrace>) -> Result<Tensor<f32>> {
    let (t, bn1) = conv_bn_relu(x, &p.conv3x3, &p.bn1)?;
    let c1 = conv2d(&t, &p.conv1x1)?;
    let (u, bn2) = conv_bn_relu(&c1, &p.dw3x3, &p.bn2)?;
    let mut out = add(&t, &u)?;
    if residual {
        add_assign(&mut out, x)?;
    }
    traces.push(BlockTrace { input: x.clone(), t, c1, u, bn1, bn2, residual });
    Ok(out)
}

/// Parameter gradients of one block in `trainable_mut` order.
struct BlockGrads(Vec<(&'static str, Vec<f32>)>);

/// Backward through `relu(bn(conv(input)))` given the gradient at the ReLU
/// output. Pushes parameter gradients and returns the input gradient.
fn conv_bn_relu_backward(
    mut g: Tensor<f32>,
    out: &Tensor<f32>,
    input: &Tensor<f32>,
    conv: &ConvParams,
    bn: &Option<crate::tensor::BatchNormParams>,
    cache: &Option<BnTrainCache>,
    need_input: bool,
    names: [&'static str; 4],
    grads: &mut Vec<(&'static str, Vec<f32>)>,
) -> Result<Option<Tensor<f32>>> {
    relu_backward_in_place(&mut g, out);
    let mut bn_grads = None;
    if let (Some(bn), Some(cache)) = (bn, cache) {
        let (gx, dgamma, dbeta) = batchnorm_train_backward(&g, cache, bn)?;
        g = gx;
        bn_grads = Some((dgamma, dbeta));
    } else if bn.is_some() != cache.is_some() {
        return Err(Error::MissingTrace);
    }
    let cg = conv2d_backward(input, conv, &g, need_input)?;
    grads.push((names[0], cg.weight.into_vec()));
    if let Some(b) = cg.bias {
        grads.push((names[1], b));
    }
    if let Some((dg, db)) = bn_grads {
        grads.push((names[2], dg));
        grads.push((names[3], db));
    }
    Ok(cg.input)
}

/// Returns the gradient with respect to the block input (if requested).
fn block_backward(
    p: &ConvBlockParams,
    tr: &BlockTrace,
    g_out: &Tensor<f32>,
    need_input: bool,
) -> Result<(Option<Tensor<f32>>, BlockGrads)> {
    // out = t + u (+ x): both branches receive g_out unchanged.
    let mut second = Vec::new();
    let g_c1 = conv_bn_relu_backward(
        g_out.clone(),
        &tr.u,
        &tr.c1,
        &p.dw3x3,
        &p.bn2,
        &tr.bn2,
        true,
        ["dw3x3.weight", "dw3x3.bias", "bn2.gamma", "bn2.beta"],
        &mut second,
    )?
    .expect("requested");
    let g1 = conv2d_backward(&tr.t, &p.conv1x1, &g_c1, true)?;
    let mut g_t = g1.input.expect("requested");
    add_assign(&mut g_t, g_out)?;

    let mut first = Vec::new();
    let g_x = conv_bn_relu_backward(
        g_t,
        &tr.t,
        &tr.input,
        &p.conv3x3,
        &p.bn1,
        &tr.bn1,
        need_input || tr.residual,
        ["conv3x3.weight", "conv3x3.bias", "bn1.gamma", "bn1.beta"],
        &mut first,
    )?;
    let g_x = match g_x {
        Some(mut g) if tr.residual => {
            add_assign(&mut g, g_out)?;
            Some(g)
        }
        other => other,
    };

    let mut all = first;
    all.push(("conv1x1.weight", g1.weight.into_vec()));
    if let Some(b) = g1.bias {
        all.push(("conv1x1.bias", b));
    }
    all.extend(second);
    Ok((if need_input { g_x } else { None }, BlockGrads(all)))
}

/// Reverse pass from `dlogits`, yielding the gradient of every trainable
/// tensor. Skip additions copy their gradient to both branches, pooling routes
/// it to the recorded argmax and unpooling gathers it back.
pub fn backward(model: &ModelGraph, trace: &ForwardTrace, dlogits: &Tensor<f32>) -> Result<Gradients> {
    if trace.blocks.len() != 7 {
        return Err(Error::MissingTrace);
    }
    let b = &model.blocks;
    let tr = &trace.blocks;
    let [i1, i2, i3] = &trace.indices;
    let [e1s, e2s, e3s] = trace.encoder;

    let head = conv2d_backward(&trace.head_input, &model.head, dlogits, true)?;
    let g_d7 = head.input.expect("requested");

    let (g_s1, gb7) = block_backward(&b[6], &tr[6], &g_d7, true)?;
    let g_s1 = g_s1.expect("requested");
    let mut g_e1 = g_s1.clone();
    let g_d6 = max_unpool2x2_backward(&g_s1, i1)?;

    let (g_s2, gb6) = block_backward(&b[5], &tr[5], &g_d6, true)?;
    let g_s2 = g_s2.expect("requested");
    let mut g_e2 = g_s2.clone();
    let g_d5 = max_unpool2x2_backward(&g_s2, i2)?;

    let (g_s3, gb5) = block_backward(&b[4], &tr[4], &g_d5, true)?;
    let g_s3 = g_s3.expect("requested");
    let mut g_e3 = g_s3.clone();
    let g_m = max_unpool2x2_backward(&g_s3, i3)?;

    let (g_p3, gb4) = block_backward(&b[3], &tr[3], &g_m, true)?;
    add_assign(&mut g_e3, &maxpool2x2_backward(&g_p3.expect("requested"), i3, e3s)?)?;
    let (g_p2, gb3) = block_backward(&b[2], &tr[2], &g_e3, true)?;
    add_assign(&mut g_e2, &maxpool2x2_backward(&g_p2.expect("requested"), i2, e2s)?)?;
    let (g_p1, gb2) = block_backward(&b[1], &tr[1], &g_e2, true)?;
    add_assign(&mut g_e1, &maxpool2x2_backward(&g_p1.expect("requested"), i1, e1s)?)?;
    let (_, gb1) = block_backward(&b[0], &tr[0], &g_e1, false)?;

    let mut entries = Vec::new();
    for (l, g) in [gb1, gb2, gb3, gb4, gb5, gb6, gb7].into_iter().enumerate() {
        entries.extend(g.0.into_iter().map(|(n, v)| (format!("b{}.{n}", l + 1), v)));
    }
    entries.push(("head.weight".to_string(), head.weight.into_vec()));
    if let Some(bias) = head.bias {
        entries.push(("head.bias".to_string(), bias));
    }
    Ok(Gradients { entries })
}

/// Holds the trace of the most recent forward pass; each trace can be
/// consumed by exactly one backward pass.
#[derive(Debug, Default)]
pub struct GradTape {
    trace: Option<ForwardTrace>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, model: &ModelGraph, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (y, trace) = forward_train(model, x)?;
        self.trace = Some(trace);
        Ok(y)
    }

    pub fn backward(&mut self, model: &ModelGraph, dlogits: &Tensor<f32>) -> Result<(Gradients, ForwardTrace)> {
        let trace = self.trace.take().ok_or(Error::MissingTrace)?;
        let g = backward(model, &trace, dlogits)?;
        Ok((g, trace))
    }
}

/// Folds the batch statistics of a trace into the running statistics.
pub fn update_running_stats(model: &mut ModelGraph, trace: &ForwardTrace) {
    for (layer, which, cache) in trace.bn_caches() {
        let block = &mut model.blocks[layer - 1];
        let bn = if which == 1 { block.bn1.as_mut() } else { block.bn2.as_mut() };
        if let Some(bn) = bn {
            bn.update_running(&cache.batch_mean, &cache.batch_var, cache.count);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn backward_without_forward_fails() {
        let m = build_model(0);
        let err = GradTape::new().backward(&m, &Tensor::zeros(Shape::new(1, 1, 8, 8))).unwrap_err();
        assert!(matches!(err, Error::MissingTrace));
    }

    #[test]
    fn gradient_names_follow_parameters() {
        let mut m = build_model(0);
        let x = Tensor::full(Shape::new(2, 3, 16, 16), 0.3);
        let mut tape = GradTape::new();
        let y = tape.forward(&m, &x).unwrap();
        let (g, _) = tape.backward(&m, &Tensor::ones(y.shape())).unwrap();
        let params = m.trainable_mut();
        assert_eq!(params.len(), g.entries.len());
        for ((pn, p), (gn, gv)) in params.iter().zip(&g.entries) {
            assert_eq!(pn, gn);
            assert_eq!(p.len(), gv.len());
        }
    }
}
