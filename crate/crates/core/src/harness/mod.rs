//! Scenario suites, trials across trigger modes, metrics and reports.

pub mod metrics;
pub mod report;
pub mod scenario;
pub mod trial;

pub use metrics::{compute_metrics, GroupMetrics, Metrics, MetricsError};
pub use report::emit_report;
pub use scenario::{load_scenario, load_suite, parse_scenario, CaseType, Expected, Scenario, ScenarioError};
pub use trial::{classify_failure, run_suite, run_trial, run_trial_with, FailureCategory, Outcome, TrialRecord};
