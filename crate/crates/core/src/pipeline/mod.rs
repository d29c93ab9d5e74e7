//! Training, checkpointing, evaluation and inference.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, LogEntry};
pub use config::TrainConfig;
pub use evaluate::{evaluate, evaluate_split, infer, AssignMode, InferredKeypoint};
pub use optim::Adam;
pub use train::{train, Start, TrainOutcome};
