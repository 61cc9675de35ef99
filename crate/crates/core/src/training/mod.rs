//! Losses, the AdamW optimizer, the learning-rate schedule and the training
//! loop with checkpointing.

pub mod config;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use config::{RunConfig, TrainSettings};
pub use loss::{loss, LossKind};
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::{lr_schedule, Schedule};
pub use trainer::{denoise, evaluate, metrics_csv, train, EvalReport, LogRow, Trainer, METRICS_HEADER};
