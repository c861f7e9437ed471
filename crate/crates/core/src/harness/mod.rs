//! Experiment runner: configuration, invariant checks, cost metrics and
//! the acceptance suite.

pub mod config;
pub mod experiments;
pub mod invariants;
pub mod metrics;
pub mod runner;

pub use config::{ExperimentConfig, FaultKind, FaultSpec, ProtocolKind};
pub use experiments::{run_suite, CriterionResult, SuiteOptions};
pub use invariants::{InvariantReport, ViolationCounts};
pub use metrics::{cost_report, measure_round_cost, CostConformance, CostReport};
pub use runner::{run, RunResult};
