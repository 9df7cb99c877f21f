//! End-to-end orchestration: configuration, training, checkpoints, and inference.

pub mod checkpoint;
pub mod config;
pub mod enhance;
pub mod train;

pub use checkpoint::{CheckpointMeta, LoadedCheckpoint, CHECKPOINT_KIND};
pub use config::TrainConfig;
pub use enhance::{enhance, Enhancer, ENHANCED_SUFFIX};
pub use train::{split_dataset, train, EpochRecord, TrainOutcome, TrainSample, Trainer};
