use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{BatchNormParams, ConvParams};

/// Absorbs every batch normalization into the convolution before it:
/// `w' = w * gamma / sqrt(var + eps)` per output channel and
/// `b' = (b - mean) * gamma / sqrt(var + eps) + beta`. Already-folded blocks
/// pass through unchanged.
pub fn fold_batchnorm(model: &ModelGraph) -> Result<ModelGraph> {
    let mut out = model.clone();
    for (i, block) in out.blocks.iter_mut().enumerate() {
        if let Some(bn) = block.bn1.take() {
            fold_into(&mut block.conv3x3, &bn).map_err(|e| at_layer(e, i + 1, "bn1"))?;
        }
        if let Some(bn) = block.bn2.take() {
            fold_into(&mut block.dw3x3, &bn).map_err(|e| at_layer(e, i + 1, "bn2"))?;
        }
    }
    Ok(out)
}

fn at_layer(e: Error, layer: usize, which: &str) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("layer {layer} {which}: {m}")),
        other => other,
    }
}

fn fold_into(conv: &mut ConvParams, bn: &BatchNormParams) -> Result<()> {
    bn.validate()?;
    let c_out = conv.c_out();
    if bn.channels() != c_out {
        return Err(Error::shape(format!("batchnorm width {} vs conv output {c_out}", bn.channels())));
    }
    if let Some(c) = bn.running_var.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!("running variance of channel {c} is not positive")));
    }
    let per_out = conv.weight.len() / c_out;
    let mut bias = conv.bias.take().unwrap_or_else(|| vec![0.0; c_out]);
    for oc in 0..c_out {
        let k = bn.gamma[oc] / (bn.running_var[oc] + bn.eps).sqrt();
        conv.weight.data_mut()[oc * per_out..(oc + 1) * per_out].iter_mut().for_each(|w| *w *= k);
        bias[oc] = (bias[oc] - bn.running_mean[oc]) * k + bn.beta[oc];
    }
    conv.bias = Some(bias);
    Ok(())
}
