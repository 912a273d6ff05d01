//! Reproducible desk-scale experiments: a synthetic Markov-mixture corpus,
//! node sharding, the centralized / DiLoCo-style / SPES runners, metrics
//! files, ablation grids and run reports.

mod ablation;
mod config;
mod corpus;
mod metrics;
mod report;
mod runner;

pub use ablation::{run_ablation, write_summary, AblationCell, AblationGrid, CellOutcome, SUMMARY_FILE};
pub use config::{
    preset, preset_names, ExperimentConfig, LrConfig, OuterConfig, Paradigm, RoundPlan, SecondPhase,
    SCHEMA_VERSION,
};
pub use corpus::{gen_corpus, stationary_distribution, BatchStream, CorpusSpec, ShardPolicy, SyntheticCorpus};
pub use metrics::{
    read_metrics, source_expert_mi, utilization, write_metrics, Manifest, MetricsRow, CHECKPOINT_FILE, COST_FILE,
    LEDGER_FILE, MANIFEST_FILE, MERGES_FILE, METRICS_FILE, THEORY_FILE,
};
pub use report::{emit_report, ledger_check, LedgerCheck, Report, Totals, REPORT_JSON, REPORT_TEXT};
pub use runner::{
    evaluate, run_experiment, run_setup, serve, work, CostFile, NodeEvent, NodeTrainer, RunOptions, RunOutput,
    RunSetup, Transport,
};

use thiserror::Error;

use crate::model::ModelError;
use crate::protocol::ProtocolError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("metrics: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    pub fn context(self, context: impl Into<String>) -> Self {
        ExperimentError::Run {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;
