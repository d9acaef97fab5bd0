//! Orchestration of the background-density segmentation workflow: label
//! scoring and dataset assembly, flow or kNN training with calibration,
//! fusion fitting, segmentation, evaluation and benchmarking.
//!
//! Every stage is a function of a [`PipelineConfig`] that reads earlier
//! artifacts from the output directory; see [`commands`] for the layout.

pub mod bench;
pub mod commands;
pub mod config;
pub mod corpus;

pub use commands::{bench, evaluate, fit_fusion, gen_synthetic, prepare, segment, train, EvalRow, EvalRowKind, Layout};
pub use config::{Estimator, EstimatorChoice, FlowSettings, Overrides, PipelineConfig};

use bgdensity::Result;

/// Settings that train the synthetic corpus in seconds rather than minutes.
pub fn synthetic_config() -> PipelineConfig {
    PipelineConfig {
        estimator: EstimatorChoice::Both,
        flow: FlowSettings {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 40,
            patience: 5,
            chain_length: 4,
            hidden_width: 32,
        },
        ..PipelineConfig::default()
    }
}

/// Runs prepare, train, fit-fusion, segment and evaluate in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<EvalRow>> {
    prepare(cfg)?;
    train(cfg)?;
    fit_fusion(cfg)?;
    segment(cfg, None)?;
    evaluate(cfg)
}
