//! One decision point per trial: stream the scripted frames, build the
//! mode's payload, run the response phase and judge the outcome on the
//! ground-truth scene.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::{CaseType, Expected, Scenario};
use crate::config::Config;
use crate::executor::{resolve_truth, run_response_phase, ExecFault, PhaseOutcome, PhaseResult, TraceRecord, Verdict};
use crate::monitor::{build_payload, window_frames, EventMonitor, MonitorEvent, Snapshot, TriggerMode};
use crate::perception::{perceive, ObjectMap};
use crate::planner::{overlay_from_map, Action, Planner, PlannerFaultKind, PlannerRequest, PlannerSpec, TaskContext, WaitReason};
use crate::rng;
use crate::workspace::{
    band_tokens, group_row, parse_row, relation_holds, typical_footprint, QualitativeRelation, RelationTolerance, Scene,
    Symbol, Zone, DIGIT_MERGE_FACTOR, GROUP_GAP_FACTOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    Identification,
    Ambiguity,
    Pick,
    Result,
    Place,
}

impl FailureCategory {
    /// Classification priority order.
    pub const ALL: [FailureCategory; 5] = [
        FailureCategory::Identification,
        FailureCategory::Ambiguity,
        FailureCategory::Pick,
        FailureCategory::Result,
        FailureCategory::Place,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FailureCategory::Identification => "Identification",
            FailureCategory::Ambiguity => "Ambiguity",
            FailureCategory::Pick => "Pick",
            FailureCategory::Result => "Result",
            FailureCategory::Place => "Place",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum DecisionRecord {
    Act,
    Wait { reason: WaitReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalBlock {
    pub id: u32,
    pub symbol: Symbol,
    pub x: f64,
    pub y: f64,
    pub zone: Zone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scenario_id: String,
    pub case_type: CaseType,
    pub mode: TriggerMode,
    pub planner: String,
    pub seed: u64,
    pub planner_calls: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_frames: Option<(u64, u64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionRecord>,
    pub actions: Vec<Action>,
    pub trace: Vec<TraceRecord>,
    pub verdicts: Vec<Verdict>,
    pub retries: u32,
    pub recovery_executed: bool,
    pub injected_planner_faults: Vec<PlannerFaultKind>,
    pub injected_execution_faults: Vec<ExecFault>,
    /// Mislabelled plus missed detections in the map the planner saw.
    pub perception_errors: u32,
    pub picked_band_block: bool,
    /// The chosen result symbols (or the wait) match the task rules.
    pub result_correct: bool,
    /// Result plus target relations match the task rules.
    pub reasoning_correct: bool,
    pub final_scene: Vec<FinalBlock>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_category: Option<FailureCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("record {0} is a success")]
pub struct NotAFailure(pub String);

/// Earliest pipeline divergence, in the order Identification, Ambiguity,
/// Pick, Result, Place.
pub fn classify_failure(record: &TrialRecord) -> Result<FailureCategory, NotAFailure> {
    if record.outcome == Outcome::Success {
        return Err(NotAFailure(record.scenario_id.clone()));
    }
    if !record.reasoning_correct && record.perception_errors > 0 {
        return Ok(FailureCategory::Identification);
    }
    if matches!(record.decision, None | Some(DecisionRecord::Wait { reason: WaitReason::InsufficientEvidence })) {
        return Ok(FailureCategory::Ambiguity);
    }
    if record.picked_band_block {
        return Ok(FailureCategory::Pick);
    }
    if !record.result_correct {
        return Ok(FailureCategory::Result);
    }
    Ok(FailureCategory::Place)
}

fn task_of(scene: &Scene) -> TaskContext {
    TaskContext { expression_band: scene.expression_band, footprint: typical_footprint(scene) }
}

fn perception_errors(map: &ObjectMap, truth: &Scene) -> u32 {
    let resolved = resolve_truth(map, truth);
    let mislabels = map
        .entries
        .iter()
        .filter(|(id, e)| match resolved.get(id) {
            Some(t) => truth.blocks[t].symbol != e.symbol_estimate,
            None => true,
        })
        .count();
    let seen: BTreeSet<u32> = resolved.values().copied().collect();
    let missed = truth.on_table().filter(|b| !seen.contains(&b.block_id)).count();
    (mislabels + missed) as u32
}

struct Judgement {
    result_correct: bool,
    reasoning_correct: bool,
    picked_band_block: bool,
    success: bool,
}

fn expected_value(symbols: &[Symbol]) -> Option<i64> {
    let text: String = symbols.iter().map(|s| s.as_ascii()).collect();
    text.parse().ok()
}

fn unchanged_except(before: &Scene, after: &Scene, moved: &BTreeSet<u32>) -> bool {
    before.blocks.iter().all(|(id, b)| {
        moved.contains(id) || after.blocks.get(id).is_some_and(|a| a.zone == b.zone && a.pose.position().distance(b.pose.position()) < 1e-6)
    })
}

/// Every place puts the carried block right of the previous one, starting
/// at the target `=`.
fn relations_correct(actions: &[Action], resolved: &BTreeMap<u32, u32>, target_equals: Option<u32>) -> bool {
    let mut expected_reference = target_equals;
    let mut held = None;
    for action in actions {
        match *action {
            Action::Pick { target_id } => held = resolved.get(&target_id).copied(),
            Action::Place { reference_id, relation, .. } => {
                if relation != QualitativeRelation::RightOf || resolved.get(&reference_id).copied() != expected_reference {
                    return false;
                }
                expected_reference = held.take();
            }
            Action::Wait { .. } => return false,
        }
    }
    true
}

fn judge(scenario: &Scenario, map: &ObjectMap, truth_before: &Scene, phase: &PhaseResult) -> Judgement {
    let response = phase.response.as_ref();
    let resolved = resolve_truth(map, truth_before);
    let picks: Vec<Option<u32>> = response
        .map(|r| r.picked_ids().iter().map(|id| resolved.get(id).copied()).collect())
        .unwrap_or_default();
    let picked_band_block = picks
        .iter()
        .flatten()
        .any(|t| truth_before.blocks[t].zone == Zone::ExpressionRow);
    let after = &phase.scene;
    match (&scenario.expected, scenario.case_type) {
        (Expected::Result(symbols), CaseType::Solvable) => {
            let fail = Judgement { result_correct: false, reasoning_correct: false, picked_band_block, success: false };
            let Some(response) = response.filter(|r| !r.is_wait()) else { return fail };
            let Some(picked_truth) = picks.iter().copied().collect::<Option<Vec<u32>>>() else { return fail };
            let result_correct = !picked_band_block
                && picked_truth.iter().map(|t| truth_before.blocks[t].symbol).collect::<Vec<_>>() == *symbols;
            let reasoning_correct =
                result_correct && relations_correct(&response.actions, &resolved, scenario.target_equals);
            let success = reasoning_correct
                && phase.outcome == PhaseOutcome::Completed
                && completion_holds(scenario, after, truth_before, &picked_truth, symbols);
            Judgement { result_correct, reasoning_correct, picked_band_block, success }
        }
        _ => {
            let waited = response.and_then(|r| r.wait_reason()) == Some(WaitReason::NoSolution);
            let untouched = unchanged_except(truth_before, after, &BTreeSet::new());
            Judgement { result_correct: waited, reasoning_correct: waited, picked_band_block, success: waited && untouched }
        }
    }
}

/// The result blocks sit in a right-of chain after the target `=`, the
/// row reads as the completed equation and nothing else moved.
fn completion_holds(scenario: &Scenario, after: &Scene, before: &Scene, picked: &[u32], symbols: &[Symbol]) -> bool {
    let Some(equals) = scenario.target_equals else { return false };
    let tolerance = RelationTolerance::for_footprint(typical_footprint(after));
    let mut reference = equals;
    for &id in picked {
        if !matches!(relation_holds(after, id, reference, QualitativeRelation::RightOf, tolerance), Ok(true)) {
            return false;
        }
        reference = id;
    }
    let footprint = typical_footprint(after);
    let groups = group_row(band_tokens(after), GROUP_GAP_FACTOR * footprint);
    let Some(group) = groups.into_iter().find(|g| g.iter().any(|t| t.id == equals)) else { return false };
    let written = parse_row(group, DIGIT_MERGE_FACTOR * footprint).ok().and_then(|p| p.written_result);
    let moved: BTreeSet<u32> = picked.iter().copied().collect();
    written.is_some() && written == expected_value(symbols) && unchanged_except(before, after, &moved)
}

fn final_blocks(scene: &Scene) -> Vec<FinalBlock> {
    scene
        .blocks
        .values()
        .map(|b| FinalBlock { id: b.block_id, symbol: b.symbol, x: b.pose.x, y: b.pose.y, zone: b.zone })
        .collect()
}

/// Seed of one trial, independent of mode and planner.
pub fn trial_seed(run_seed: u64, scenario: &Scenario) -> u64 {
    rng::derive(run_seed ^ rng::mix(scenario.seed), &scenario.id)
}

struct Decided {
    map: ObjectMap,
    truth: Scene,
    phase: PhaseResult,
    calls: u32,
    planner_faults: Vec<PlannerFaultKind>,
    event_frames: Option<(u64, u64)>,
}

fn request_for(payload: crate::monitor::EventPayload, map: &ObjectMap, truth: &Scene, config: &Config) -> PlannerRequest {
    PlannerRequest { payload, overlay: overlay_from_map(map), task: task_of(truth), contract: config.contract.clone() }
}

fn event_trial(
    mode: TriggerMode,
    planner: &mut dyn Planner,
    config: &Config,
    seed: u64,
    frames: &[(Scene, f64)],
) -> Result<Decided, String> {
    let mut monitor = EventMonitor::new(config.monitor).map_err(|e| e.to_string())?;
    let mut completed = None;
    'frames: for (scene, rho) in frames {
        for event in monitor.ingest_frame(scene, *rho).map_err(|e| e.to_string())? {
            if let MonitorEvent::EventCompleted { onset_frame, offset_frame, pre, post } = event {
                completed = Some((onset_frame, offset_frame, pre, post));
                break 'frames;
            }
        }
    }
    let (onset, offset, pre, post) = completed.ok_or("no interaction event was detected")?;
    monitor.suspend();
    let payload = match mode {
        TriggerMode::Proposed => build_payload(mode, Some(pre), Some(post.clone()), None, None),
        TriggerMode::PostOnly | TriggerMode::RequestDriven => build_payload(mode, None, Some(post.clone()), None, None),
        TriggerMode::AlwaysOn => unreachable!("always-on is scheduled separately"),
    }
    .map_err(|e| e.to_string())?;
    payload.check_shape().map_err(|e| e.to_string())?;
    let phase_cfg = phase_config(config, seed);
    let map = perceive(&post, &phase_cfg.perception);
    let truth = frames[post.frame_index as usize].0.clone();
    let request = request_for(payload, &map, &truth, config);
    let phase = run_response_phase(&request, planner, &map, &truth, &phase_cfg, seed);
    Ok(Decided {
        calls: phase.planner_calls,
        planner_faults: phase.injected_planner_fault.into_iter().collect(),
        map,
        truth,
        phase,
        event_frames: Some((onset, offset)),
    })
}

fn always_on_trial(
    scenario: &Scenario,
    planner: &mut dyn Planner,
    config: &Config,
    seed: u64,
    frames: &[(Scene, f64)],
) -> Result<Decided, String> {
    let phase_cfg = phase_config(config, seed);
    let first = scenario.motion_start() + scenario.always_on_offset_frames;
    let mut last: Option<Decided> = None;
    let mut calls = 0;
    let mut planner_faults = Vec::new();
    for k in 0..u64::from(config.always_on.max_queries) {
        let query = first + k * config.always_on.period_frames;
        let Some(indices) = window_frames(query) else { continue };
        if query as usize >= frames.len() {
            break;
        }
        let window: Vec<Snapshot> = indices
            .iter()
            .map(|&i| {
                let (scene, rho) = &frames[i as usize];
                Snapshot::capture(scene, *rho, &config.monitor)
            })
            .collect();
        let latest = window.last().cloned().expect("window is non-empty");
        let payload = build_payload(TriggerMode::AlwaysOn, None, None, Some(window), None).map_err(|e| e.to_string())?;
        let map = perceive(&latest, &phase_cfg.perception);
        let truth = frames[query as usize].0.clone();
        let request = request_for(payload, &map, &truth, config);
        let phase = run_response_phase(&request, planner, &map, &truth, &phase_cfg, rng::derive(seed, &format!("query-{k}")));
        calls += phase.planner_calls;
        planner_faults.extend(phase.injected_planner_fault);
        let confident = !matches!(
            phase.outcome,
            PhaseOutcome::Waited { reason: WaitReason::InsufficientEvidence } | PhaseOutcome::PlannerFailed { .. }
        );
        last = Some(Decided { map, truth, phase, calls, planner_faults: planner_faults.clone(), event_frames: None });
        if confident {
            break;
        }
    }
    last.ok_or_else(|| "no always-on query fell inside the trial".to_string())
}

fn phase_config(config: &Config, seed: u64) -> crate::executor::PhaseConfig {
    let mut phase = config.phase();
    phase.perception.seed = rng::derive(config.perception.seed ^ seed, "perception");
    phase.execution_faults.seed = rng::derive(config.execution_faults.seed ^ seed, "execution");
    phase
}

fn decision_of(phase: &PhaseResult) -> Option<DecisionRecord> {
    if matches!(phase.outcome, PhaseOutcome::PlannerFailed { .. }) {
        return None;
    }
    phase.response.as_ref().map(|r| match r.wait_reason() {
        Some(reason) => DecisionRecord::Wait { reason },
        None => DecisionRecord::Act,
    })
}

/// Runs one trial with a fresh planner built from `spec`.
pub fn run_trial(scenario: &Scenario, mode: TriggerMode, spec: &PlannerSpec, config: &Config, run_seed: u64) -> TrialRecord {
    let seed = trial_seed(run_seed, scenario);
    let mut planner = spec.build(seed);
    run_trial_with(scenario, mode, planner.as_mut(), spec.label(), config, seed)
}

/// Runs one trial with a caller-supplied planner and trial seed.
pub fn run_trial_with(
    scenario: &Scenario,
    mode: TriggerMode,
    planner: &mut dyn Planner,
    planner_label: &str,
    config: &Config,
    seed: u64,
) -> TrialRecord {
    let span = config.always_on.period_frames * u64::from(config.always_on.max_queries.saturating_sub(1));
    let frames = scenario.frames(&config.monitor, &config.activity, span);
    let decided = match mode {
        TriggerMode::AlwaysOn => always_on_trial(scenario, planner, config, seed, &frames),
        _ => event_trial(mode, planner, config, seed, &frames),
    };
    let mut record = TrialRecord {
        scenario_id: scenario.id.clone(),
        case_type: scenario.case_type,
        mode,
        planner: planner_label.to_string(),
        seed,
        planner_calls: 0,
        event_frames: None,
        decision: None,
        actions: Vec::new(),
        trace: Vec::new(),
        verdicts: Vec::new(),
        retries: 0,
        recovery_executed: false,
        injected_planner_faults: Vec::new(),
        injected_execution_faults: Vec::new(),
        perception_errors: 0,
        picked_band_block: false,
        result_correct: false,
        reasoning_correct: false,
        final_scene: final_blocks(&scenario.final_scene),
        outcome: Outcome::Failure,
        failure_category: None,
        diagnostic: None,
    };
    match decided {
        Err(diagnostic) => record.diagnostic = Some(diagnostic),
        Ok(d) => {
            let judgement = judge(scenario, &d.map, &d.truth, &d.phase);
            record.planner_calls = d.calls;
            record.event_frames = d.event_frames;
            record.decision = decision_of(&d.phase);
            record.actions = d.phase.response.as_ref().map(|r| r.actions.clone()).unwrap_or_default();
            record.injected_execution_faults = d.phase.trace.iter().filter_map(|t| t.injected_fault).collect();
            record.trace = d.phase.trace.clone();
            record.verdicts = d.phase.verdicts.clone();
            record.retries = d.phase.retries;
            record.recovery_executed = d.phase.recovery_executed;
            record.injected_planner_faults = d.planner_faults;
            record.perception_errors = perception_errors(&d.map, &d.truth);
            record.picked_band_block = judgement.picked_band_block;
            record.result_correct = judgement.result_correct;
            record.reasoning_correct = judgement.reasoning_correct;
            record.final_scene = final_blocks(&d.phase.scene);
            record.outcome = if judgement.success { Outcome::Success } else { Outcome::Failure };
            record.diagnostic = match &d.phase.outcome {
                PhaseOutcome::Completed | PhaseOutcome::Waited { .. } => None,
                PhaseOutcome::PlannerFailed { error, .. }
                | PhaseOutcome::Rejected { error }
                | PhaseOutcome::ExecutionFailed { error } => Some(error.clone()),
            };
        }
    }
    record.failure_category = classify_failure(&record).ok();
    record
}

/// Runs every scenario in `mode`, in suite order.
pub fn run_suite(scenarios: &[Scenario], mode: TriggerMode, spec: &PlannerSpec, config: &Config, run_seed: u64) -> Vec<TrialRecord> {
    scenarios.iter().map(|s| run_trial(s, mode, spec, config, run_seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> TrialRecord {
        TrialRecord {
            scenario_id: "x".into(),
            case_type: CaseType::Solvable,
            mode: TriggerMode::Proposed,
            planner: "oracle".into(),
            seed: 0,
            planner_calls: 1,
            event_frames: None,
            decision: Some(DecisionRecord::Act),
            actions: Vec::new(),
            trace: Vec::new(),
            verdicts: Vec::new(),
            retries: 0,
            recovery_executed: false,
            injected_planner_faults: Vec::new(),
            injected_execution_faults: Vec::new(),
            perception_errors: 0,
            picked_band_block: false,
            result_correct: true,
            reasoning_correct: true,
            final_scene: Vec::new(),
            outcome: Outcome::Failure,
            failure_category: None,
            diagnostic: None,
        }
    }

    #[test]
    fn classification_examples() {
        let wait = TrialRecord {
            decision: Some(DecisionRecord::Wait { reason: WaitReason::InsufficientEvidence }),
            reasoning_correct: false,
            ..record()
        };
        assert_eq!(classify_failure(&wait), Ok(FailureCategory::Ambiguity));
        assert_eq!(classify_failure(&record()), Ok(FailureCategory::Place));
        let confused = TrialRecord { reasoning_correct: false, perception_errors: 1, ..record() };
        assert_eq!(classify_failure(&confused), Ok(FailureCategory::Identification));
        let wrong = TrialRecord { result_correct: false, reasoning_correct: false, ..record() };
        assert_eq!(classify_failure(&wrong), Ok(FailureCategory::Result));
        let relation = TrialRecord { reasoning_correct: false, ..record() };
        assert_eq!(classify_failure(&relation), Ok(FailureCategory::Place));
        let pick = TrialRecord { result_correct: false, reasoning_correct: false, picked_band_block: true, ..record() };
        assert_eq!(classify_failure(&pick), Ok(FailureCategory::Pick));
        let ok = TrialRecord { outcome: Outcome::Success, ..record() };
        assert!(classify_failure(&ok).is_err());
    }
}
