//! Experiment driver: synthetic correlated workloads, an in-process
//! deployment on a virtual clock, and the metrics reported for each
//! distribution strategy.

pub mod experiment;
pub mod report;
pub mod sim;
pub mod workload;

pub use experiment::{
    adapt_threshold, failure_and_addition_scenario, reuse_accuracy_oracle, run_experiment, run_once,
    threshold_adaptation, AdaptationConfig, Deployment, ExperimentReport, RunLog,
};
pub use sim::{Cluster, Event, ResponseRecord, SimConfig};
pub use workload::{generate_workload, Task, Workload, WorkloadConfig};
