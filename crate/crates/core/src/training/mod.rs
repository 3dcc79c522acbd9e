//! Loss, synthetic data, the training loop and evaluation.

mod config;
pub mod data;
pub mod eval;
mod loss;
pub mod trainer;

pub use config::{GuidanceFlags, ModelConfig};
pub use data::{gen_synthetic, load_dataset, save_dataset, split, SampleRecord};
pub use eval::{evaluate, EvalReport, SampleMetrics};
pub use loss::total_loss;
pub use trainer::{train, train_with, EpochLog, TrainReport};
