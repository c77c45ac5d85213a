//! Experiment driver: configuration, per-seed pipelines, ablations, the
//! waypoint-executor comparison and output files.

mod config;
mod output;
mod pipeline;

pub use config::{ConfigError, ExperimentConfig, FieldError, ProviderKind, CONFIG_SCHEMA_VERSION};
pub use output::{emit_plots, read_curves, render_plot, write_curves, write_results, CurveRow, ResultRow};
pub use pipeline::{
    ablation_suite, acquire_waypoints, env_for, finetune_seed, label_log, make_provider, moka_comparison, prepare,
    pretrain_seed, regimes, run_experiment, train_seed, AblationResult, MokaComparison, Prepared, PretrainedSeed,
    Regime, SeedRun, ANNOTATION_SEED,
};

use std::path::PathBuf;

use crate::learn::LearnError;
use crate::log::LogError;
use crate::prompting::PromptError;
use crate::reward::RewardError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}
