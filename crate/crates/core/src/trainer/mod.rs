//! Optimization, checkpointed training, evaluation and ablation runs.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod train;

pub use ablation::{ablation_table, run_ablation_matrix, variant_grid, AblationRow};
pub use config::{lr_schedule, TrainConfig};
pub use eval::{evaluate_checkpoint, evaluate_model, load_model, predict_probability};
pub use loss::{bce_loss, bce_with_logits};
pub use optim::AdamW;
pub use train::{train, EpochRecord, StepRecord, TrainOptions, TrainOutcome, TrainingState};
