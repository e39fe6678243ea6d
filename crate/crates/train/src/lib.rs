//! Training loop, checkpoints and command line plumbing for two
//! cross-supervising segmentation networks trained on weak/strong views and
//! their patch-displaced variants.

pub mod checkpoint;
pub mod config;
pub mod dump;
mod error;
pub mod optim;
pub mod trainer;

pub use config::{Ablation, TrainConfig};
pub use error::{Result, TrainError};
pub use trainer::{FitSummary, LogRecord, StepOutput, Trainer};
