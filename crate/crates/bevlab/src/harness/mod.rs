//! Experiment orchestration: configuration, dataset synthesis, two-stage
//! training, evaluation, sweeps, and artifact emission.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod render;
pub mod train;

pub use config::ExperimentConfig;
pub use eval::{eval_miou, EvalResult, EvalSpace};
pub use train::{train_stage_a, train_stage_b, TrainReport};
