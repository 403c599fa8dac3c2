//! AdamW training loop with backbone freezing, evaluation and run configs.

mod config;
mod eval;
mod optim;
mod trainer;

pub use config::{LrSchedule, Precision, TrainConfig, LR_GRID};
pub use eval::{evaluate, predict, predict_one, prepare_examples, EVAL_BATCH};
pub use optim::{adamw_step, check_grads, clip_grad_norm, OptimState};
pub use trainer::{format_epoch, train, EpochRecord, TrainReport};
