//! AdamW, learning-rate schedule, training loops and evaluation.

mod checkpoint;
mod loops;
mod optim;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_VERSION};
pub use loops::{
    accuracy, argmax, evaluate, finetune, pretrain, series, transfer_weights, EpochHook,
    Evaluation, FinetuneOutcome, MetricRow, TrainConfig, TrainOutcome, TransferReport,
};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, skips_weight_decay, AdamW, OptimizerState};
