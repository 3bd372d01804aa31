//! Training loops, the evaluation protocol and the comparison table.
//!
//! Metrics follow one convention throughout: temporal CC is the Pearson
//! correlation along time per electrode, averaged over every defined
//! (electrode, beat) pair, and MSE/MAE are taken in millivolts after
//! undoing the z-score normalization.

mod config;
mod evaluate;
mod metrics;
mod model;
mod train;

pub use config::{ClassicalConfig, ExperimentConfig, ModelKind};
pub use evaluate::{
    classical_config, evaluate, export_traces, run_comparison, run_comparison_keeping_models, Comparison, ComparisonRow, Method, TraceExport,
    COMPARISON_HEADER, TRACE_HEADER,
};
pub use metrics::{mse_mae, temporal_cc, BeatMetrics, ElectrodeCc, MetricsReport};
pub use model::{spec_path, ModelSpec, Network, NormStats, Prediction, TrainedModel, schedule_note};
pub use train::{log_csv, train, untrained, EpochRecord, TrainOutcome, LOG_HEADER};
