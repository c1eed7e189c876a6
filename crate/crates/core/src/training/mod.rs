//! Optimizer, checkpoints and the training loops.

mod adam;
mod checkpoint;
mod config;
mod trainer;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Mode, TrainConfig};
pub use trainer::{
    flame_batch_loss, flame_paths, partner_trace_csv, pretrain_frozen, trace_csv, trace_header,
    trace_row, train, train_baseline, train_flame, train_observed, BatchLoss, EpochRecord,
    RngStreams, TrainOutcome, ValMetrics,
};
