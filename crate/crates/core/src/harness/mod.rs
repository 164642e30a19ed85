//! Experiment orchestration behind the `fluid` command line: configuration
//! loading, the generate/train/infer/pf/evaluate/ess verbs, CSV output and
//! run manifests.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod manifest;

pub use commands::{
    cmd_ess, cmd_evaluate, cmd_generate, cmd_infer, cmd_pf, cmd_train, Evaluation, InferMode, InferRequest, Method,
    MetricRow, PfOptions, Reference, Run,
};
pub use config::{load_config, ExperimentConfig, FactorSource, Source};
