//! Weighted BCE + IoU objective, reverse-mode gradients, SGD with cosine
//! warm restarts, and the training loop.

mod backward;
mod loss;
mod optim;
mod trainer;

pub use backward::{backward, forward_train, update_running_stats, ForwardTrace, GradTape, Gradients};
pub use loss::{bce_with_logit, loss, loss_and_grad, weight_map, LossOutput, DEFAULT_LAMBDA, WEIGHT_POOL};
pub use optim::{lr_schedule, sgd_step, TrainConfig};
pub use trainer::{evaluate_dice, train, train_with, TrainOutcome, TrainRecord};
