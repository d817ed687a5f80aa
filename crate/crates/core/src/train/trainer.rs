use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{backward, forward_train, update_running_stats};
use super::loss::loss_and_grad;
use super::optim::{lr_schedule, sgd_step, TrainConfig};
use crate::data::{augment, DatasetIndex, Sample};
use crate::error::{Error, Result};
use crate::metrics::{confusion, Confusion, DEFAULT_THRESHOLD};
use crate::model::{build_model, ModelGraph};
use crate::tensor::{sigmoid, Tensor};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    /// `None` on epochs without validation or with an empty validation split.
    pub val_dice: Option<f64>,
}

impl TrainRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation Dice (the final model when nothing
    /// was validated).
    pub best: ModelGraph,
    pub last: ModelGraph,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub log: Vec<TrainRecord>,
    pub steps: usize,
}

pub fn train(cfg: &TrainConfig, data: &DatasetIndex) -> Result<TrainOutcome> {
    train_with(cfg, data, &mut |_| {})
}

/// Seeded, single-threaded-deterministic training loop. `on_record` sees each
/// log line as soon as its epoch ends.
pub fn train_with(cfg: &TrainConfig, data: &DatasetIndex, on_record: &mut dyn FnMut(&TrainRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut model = build_model(cfg.seed);
    let mut best: Option<(f64, usize, ModelGraph)> = None;
    let mut log = Vec::new();
    let mut step = 0usize;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 0..cfg.epochs {
        if step >= max_steps {
            break;
        }
        let lr = lr_schedule(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break;
            }
            let batch: Vec<Sample> = chunk.iter().map(|&i| augment(&data.train[i], &cfg.augment, &mut rng)).collect();
            let x = Tensor::stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let y = Tensor::stack(&batch.iter().map(|s| &s.mask).collect::<Vec<_>>())?;

            let (logits, trace) = forward_train(&model, &x)?;
            let (l, dlogits) = loss_and_grad(&logits, &y, cfg.lambda)?;
            if !l.total.is_finite() {
                return Err(Error::Divergence { step, loss: l.total });
            }
            let grads = backward(&model, &trace, &dlogits)?;
            sgd_step(&mut model, &grads, lr).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { step, loss: l.total },
                other => other,
            })?;
            update_running_stats(&mut model, &trace);
            loss_sum += l.total;
            batches += 1;
            step += 1;
        }

        let last_epoch = epoch + 1 == cfg.epochs || step >= max_steps;
        let val_dice = if !data.val.is_empty() && ((epoch + 1) % cfg.val_every == 0 || last_epoch) {
            Some(evaluate_dice(&model, &data.val, DEFAULT_THRESHOLD)?)
        } else {
            None
        };
        if let Some(d) = val_dice {
            if best.as_ref().is_none_or(|(b, _, _)| d > *b) {
                best = Some((d, epoch, model.clone()));
            }
        }
        let rec = TrainRecord { epoch, step, lr, loss: loss_sum / batches.max(1) as f64, val_dice };
        on_record(&rec);
        log.push(rec);
    }

    let (best_val_dice, best_epoch, best_model) = match best {
        Some((d, e, m)) => (Some(d), Some(e), m),
        None => (None, None, model.clone()),
    };
    Ok(TrainOutcome { best: best_model, last: model, best_val_dice, best_epoch, log, steps: step })
}

/// Pooled Dice of the float model's thresholded predictions over `samples`.
pub fn evaluate_dice(model: &ModelGraph, samples: &[Sample], threshold: f32) -> Result<f64> {
    let mut c = Confusion::default();
    for s in samples {
        let p = sigmoid(&model.forward(&s.image)?);
        c = c + confusion(&p, &s.mask, threshold)?;
    }
    Ok(c.dice())
}
