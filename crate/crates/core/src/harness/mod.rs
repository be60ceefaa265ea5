//! Configuration-driven experiment runner: pretraining, reprogramming,
//! evaluation, attack demo, and plot-ready reporting.

pub mod attack;
pub mod config;
pub mod report;
pub mod run;

pub use attack::{attack_csv, attack_demo, AttackConfig, AttackReport, AttackSeedRecord};
pub use config::{
    DatasetSource, DownstreamSection, ExperimentConfig, Method, MethodParams, OptConfig,
    PretrainSection, ResolvedExperiment, METHOD_NAMES,
};
pub use report::{report_summary, Summary, SummaryRow};
pub use run::{
    metrics_csv, run_experiment, sweep_aggregators, sweep_csv, Artifact, RunReport, SeedRecord,
    SweepRecord,
};
