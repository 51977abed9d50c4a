//! Success rates, planner-call statistics and failure histograms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::CaseType;
use super::trial::{FailureCategory, Outcome, TrialRecord};
use crate::monitor::TriggerMode;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no trial records")]
    EmptyRecordSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub mode: TriggerMode,
    pub case_type: CaseType,
    pub trials: u32,
    pub successes: u32,
    pub reasoning_correct: u32,
    pub esr: f64,
    pub rsr: f64,
    /// Planner calls per successful trial; `None` without successes.
    pub calls_mean: Option<f64>,
    pub calls_std: Option<f64>,
    pub histogram: BTreeMap<FailureCategory, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub groups: Vec<GroupMetrics>,
    pub total_trials: u32,
    pub solvable_trials: u32,
    pub unsolvable_trials: u32,
}

impl Metrics {
    pub fn group(&self, mode: TriggerMode, case_type: CaseType) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.mode == mode && g.case_type == case_type)
    }

    pub fn modes(&self) -> Vec<TriggerMode> {
        TriggerMode::ALL.into_iter().filter(|m| self.groups.iter().any(|g| g.mode == *m)).collect()
    }

    /// Planner calls per successful trial over both case types of `mode`.
    pub fn calls(&self, mode: TriggerMode, records: &[TrialRecord]) -> Option<(f64, f64)> {
        let calls: Vec<f64> = records
            .iter()
            .filter(|r| r.mode == mode && r.outcome == Outcome::Success)
            .map(|r| f64::from(r.planner_calls))
            .collect();
        mean_std(&calls)
    }

    /// Failure counts per category over both case types of `mode`.
    pub fn histogram(&self, mode: TriggerMode) -> BTreeMap<FailureCategory, u32> {
        let mut out = empty_histogram();
        for g in self.groups.iter().filter(|g| g.mode == mode) {
            for (k, v) in &g.histogram {
                *out.entry(*k).or_default() += v;
            }
        }
        out
    }
}

pub fn empty_histogram() -> BTreeMap<FailureCategory, u32> {
    FailureCategory::ALL.into_iter().map(|c| (c, 0)).collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn compute_metrics(records: &[TrialRecord]) -> Result<Metrics, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecordSet);
    }
    let mut keyed: BTreeMap<(TriggerMode, CaseType), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        keyed.entry((r.mode, r.case_type)).or_default().push(r);
    }
    let groups = keyed
        .into_iter()
        .map(|((mode, case_type), rs)| {
            let trials = rs.len() as u32;
            let successes = rs.iter().filter(|r| r.outcome == Outcome::Success).count() as u32;
            let reasoning_correct = rs.iter().filter(|r| r.reasoning_correct).count() as u32;
            let calls: Vec<f64> =
                rs.iter().filter(|r| r.outcome == Outcome::Success).map(|r| f64::from(r.planner_calls)).collect();
            let stats = mean_std(&calls);
            let mut histogram = empty_histogram();
            for c in rs.iter().filter_map(|r| r.failure_category) {
                *histogram.entry(c).or_default() += 1;
            }
            GroupMetrics {
                mode,
                case_type,
                trials,
                successes,
                reasoning_correct,
                esr: f64::from(successes) / f64::from(trials),
                rsr: f64::from(reasoning_correct) / f64::from(trials),
                calls_mean: stats.map(|s| s.0),
                calls_std: stats.map(|s| s.1),
                histogram,
            }
        })
        .collect();
    let count = |c: CaseType| records.iter().filter(|r| r.case_type == c).count() as u32;
    Ok(Metrics {
        groups,
        total_trials: records.len() as u32,
        solvable_trials: count(CaseType::Solvable),
        unsolvable_trials: count(CaseType::Unsolvable),
    })
}
