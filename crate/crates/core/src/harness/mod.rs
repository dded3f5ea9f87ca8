//! Experiment orchestration: configuration, training, evaluation and
//! multi-method reports.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod train;

pub use ablation::{run_ablation, run_ablation_with, run_comparison, ComparisonReport, MethodResult};
pub use config::{prepare_data, DatasetConfig, ExperimentConfig, MaskConfig, OptimConfig, OutputConfig, Splits};
pub use eval::{evaluate, evaluate_images, evaluate_reconstructor, EvalReport, SliceMetrics};
pub use train::{train, train_from, train_with, Adam, TrainOutcome};
