//! The steering loop, experiment runner and results grid.
//!
//! A run trains a baseline, then repeats: score the pool, select samples,
//! collect feedback masks, steer (counterexamples and/or the gradient
//! penalty), optionally finetune the BLA module, and evaluate on the test
//! split. With a run directory, artefacts land in
//! `<run>/{config.json, record.json, table.csv, checkpoints/, saliency/}`
//! alongside selection, trace, feedback and counterexample logs.

mod config;
mod feedback;
mod grid;
mod run;

pub use config::{
    BlaConfig, DataSpec, ExperimentConfig, FeedbackSource, ModelConfig, PoolSplit, RetrainMode, SteeringConfig, Strategy,
};
pub use feedback::{
    simulate_feedback, Feedback, FeedbackProvider, FeedbackRequest, FeedbackStore, NoProgress, OracleFeedback,
    PendingItem, Phase, ProgressEvent, ProgressSink, ReportDelta,
};
pub use grid::{grid_configs, report, run_grid};
pub use run::{
    explain_with, run_experiment, run_from_baseline, train_baseline, xil_iterate, ExperimentRecord, FeedbackRecord,
    IterationRecord, ProvenanceRow, RunEnv, RunStatus, Step, XilState,
};
