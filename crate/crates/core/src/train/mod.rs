//! Pre-training, joint multi-task fine-tuning, text-only adaptation,
//! checkpoints and corpus pruning.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod optim;
pub mod prune;
pub mod schedule;
pub mod steps;

pub use batch::{BatchKind, Example, PaddedFeatures, PaddedTokens, TrainBatch};
pub use checkpoint::{
    average_checkpoints, early_stop, load_checkpoint, parse_tensors, read_tensors, save_checkpoint, write_tensors,
    CheckpointSet, NamedTensors, Snapshot,
};
pub use config::TrainConfig;
pub use optim::{lr_at, Adam, AdamConfig, AdamMoments};
pub use prune::{prune_corpus, PruneItem, PruneReport, Recognizer};
pub use schedule::{alternate_schedule, alternate_train, BatchStream, StepKind};
pub use steps::{eval, JointLosses, StepReport, Trainer};
