//! Experiment orchestration: configuration, the training loop, baselines,
//! evaluation, theory checks and their output files.

mod checkpoint;
mod config;
mod experiment;
mod metrics;
mod verify;

pub use checkpoint::{TrainingCheckpoint, CHECKPOINT_VERSION};
pub use config::{
    AutoOr, BaselineSection, ChannelSection, EnvSection, ExperimentConfig, FlSection, Profile,
    RestartPolicy, RunSection, TheorySection,
};
pub use experiment::{run_baseline, run_evaluation, run_training, RunOutcome, Setup};
pub use metrics::{bitmap, read_csv, write_csv, MetricsRow, RoundRow};
pub use verify::{partition_report, verify_theory, PartitionReport, TheoryCheck, TheoryDetails, TheoryReport};
