//! Rule-based arithmetic planner used as ground truth.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    Action, OverlayEntry, Planner, PlannerError, PlannerOutput, PlannerRequest, PlannerResponse,
    TaskContext, WaitReason,
};
use crate::monitor::{Snapshot, TriggerMode};
use crate::workspace::{
    group_row, parse_row, ExpressionParse, Point, QualitativeRelation, RowToken, Symbol,
    DIGIT_MERGE_FACTOR, GROUP_GAP_FACTOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum Decision {
    Act,
    Wait(WaitReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalInference {
    pub decision: Decision,
    /// Result symbols left to right, including a leading minus block.
    pub required_symbols: Vec<Symbol>,
    /// Overlay id of the `=` the result goes after.
    pub equals_id: Option<u32>,
    pub note: String,
}

impl GoalInference {
    fn wait(reason: WaitReason, note: impl Into<String>) -> Self {
        GoalInference { decision: Decision::Wait(reason), required_symbols: Vec::new(), equals_id: None, note: note.into() }
    }
}

/// Evidence about what changed, when the payload provides a before-frame.
enum ChangeEvidence<'a> {
    None,
    Before(&'a Snapshot),
}

fn tokens(entries: &[&OverlayEntry]) -> Vec<RowToken> {
    entries.iter().map(|e| RowToken { symbol: e.symbol, id: e.id, anchor: e.anchor }).collect()
}

fn render_parse(p: &ExpressionParse) -> String {
    p.tokens.iter().map(|(s, _)| s.as_char()).collect()
}

/// Overlay ids whose anchor has no counterpart in `before`.
fn changed_ids(overlay: &[OverlayEntry], before: &Snapshot, eps: f64) -> BTreeSet<u32> {
    overlay
        .iter()
        .filter(|e| !before.observation.iter().any(|b| b.pose.position().distance(e.anchor) <= eps))
        .map(|e| e.id)
        .collect()
}

/// Band positions in `before` with no counterpart in the overlay.
fn vacated(overlay: &[OverlayEntry], before: &Snapshot, task: &TaskContext, eps: f64) -> Vec<Point> {
    before
        .observation
        .iter()
        .map(|b| b.pose.position())
        .filter(|p| task.in_band(*p))
        .filter(|p| !overlay.iter().any(|e| e.anchor.distance(*p) <= eps))
        .collect()
}

fn same_layout(a: &Snapshot, b: &Snapshot, eps: f64) -> bool {
    a.observation.len() == b.observation.len()
        && a.observation.iter().all(|x| {
            b.observation
                .iter()
                .any(|y| x.symbol == y.symbol && x.pose.position().distance(y.pose.position()) <= eps)
        })
}

/// Infers the assistance goal from the payload and the id overlay.
pub fn oracle_infer_goal(request: &PlannerRequest) -> Result<GoalInference, PlannerError> {
    let payload = &request.payload;
    let task = &request.task;
    let eps = 0.25 * task.footprint;

    let evidence = match payload.mode {
        TriggerMode::Proposed => ChangeEvidence::Before(
            payload.pre.as_ref().ok_or_else(|| PlannerError::MalformedObservation("missing pre snapshot".into()))?,
        ),
        TriggerMode::PostOnly | TriggerMode::RequestDriven => {
            if payload.post.is_none() {
                return Err(PlannerError::MalformedObservation("missing post snapshot".into()));
            }
            ChangeEvidence::None
        }
        TriggerMode::AlwaysOn => {
            let window = payload
                .window
                .as_ref()
                .filter(|w| !w.is_empty())
                .ok_or_else(|| PlannerError::MalformedObservation("missing observation window".into()))?;
            if window.iter().any(|s| !s.stable) {
                return Ok(GoalInference::wait(
                    WaitReason::InsufficientEvidence,
                    "window contains ongoing manipulation",
                ));
            }
            let (first, last) = (&window[0], &window[window.len() - 1]);
            if same_layout(first, last, eps) {
                ChangeEvidence::None
            } else {
                ChangeEvidence::Before(first)
            }
        }
    };

    let overlay = &request.overlay;
    let band: Vec<&OverlayEntry> = overlay.iter().filter(|e| task.in_band(e.anchor)).collect();
    let tray: Vec<&OverlayEntry> = overlay.iter().filter(|e| !task.in_band(e.anchor)).collect();
    let merge_gap = DIGIT_MERGE_FACTOR * task.footprint;
    let groups = group_row(tokens(&band), GROUP_GAP_FACTOR * task.footprint);

    let active: Vec<RowToken> = match evidence {
        ChangeEvidence::Before(before) => {
            let changed = changed_ids(overlay, before, eps);
            if changed.is_empty() {
                return Ok(GoalInference::wait(WaitReason::InsufficientEvidence, "no state change observed"));
            }
            if !vacated(overlay, before, task, eps).is_empty() {
                return Ok(GoalInference::wait(
                    WaitReason::InsufficientEvidence,
                    "blocks were removed from the expression row",
                ));
            }
            let touched: Vec<&Vec<RowToken>> =
                groups.iter().filter(|g| g.iter().any(|t| changed.contains(&t.id))).collect();
            let all_in_band = changed.iter().all(|id| band.iter().any(|e| e.id == *id));
            match (all_in_band, touched.as_slice()) {
                (true, [g]) => (*g).clone(),
                _ => {
                    return Ok(GoalInference::wait(
                        WaitReason::InsufficientEvidence,
                        "change is not consistent with building one expression",
                    ))
                }
            }
        }
        ChangeEvidence::None => {
            let open: Vec<&Vec<RowToken>> = groups
                .iter()
                .filter(|g| {
                    parse_row((*g).clone(), merge_gap)
                        .map(|p| p.complete && p.written_result.is_none())
                        .unwrap_or(false)
                })
                .collect();
            match open.as_slice() {
                [g] => (*g).clone(),
                [] => {
                    return Ok(GoalInference::wait(
                        WaitReason::InsufficientEvidence,
                        "no expression awaiting completion",
                    ))
                }
                _ => {
                    return Ok(GoalInference::wait(
                        WaitReason::InsufficientEvidence,
                        "several open expressions; cannot tell which one changed",
                    ))
                }
            }
        }
    };

    let parse = match parse_row(active, merge_gap) {
        Ok(p) => p,
        Err(e) => return Ok(GoalInference::wait(WaitReason::NoSolution, e.to_string())),
    };
    let text = render_parse(&parse);
    if parse.written_result.is_some() || (parse.terms.len() > 4) {
        return Ok(GoalInference::wait(WaitReason::NoSolution, format!("{text} is already completed")));
    }
    if !parse.complete {
        return Ok(GoalInference::wait(WaitReason::InsufficientEvidence, format!("{text} is still being built")));
    }
    let Some(value) = parse.value else {
        return Ok(GoalInference::wait(WaitReason::NoSolution, format!("{text} has no integer result")));
    };
    let required = Symbol::spell(value);
    let mut available: Vec<Symbol> = tray.iter().map(|e| e.symbol).collect();
    for symbol in &required {
        match available.iter().position(|s| s == symbol) {
            Some(i) => {
                available.swap_remove(i);
            }
            None => {
                return Ok(GoalInference::wait(
                    WaitReason::NoSolution,
                    format!("{text}{value} needs a {symbol} block that is not among the candidates"),
                ))
            }
        }
    }
    Ok(GoalInference {
        decision: Decision::Act,
        required_symbols: required,
        equals_id: parse.equals_id(),
        note: format!("complete {text} with {value}"),
    })
}

/// Turns an inference into an id-referenced plan.
pub fn oracle_plan(inference: &GoalInference, overlay: &[OverlayEntry], task: &TaskContext) -> Result<PlannerResponse, PlannerError> {
    let reason = match inference.decision {
        Decision::Wait(reason) => reason,
        Decision::Act => {
            let equals_id = inference.equals_id.ok_or(PlannerError::ReferenceNotFound(u32::MAX))?;
            if !overlay.iter().any(|e| e.id == equals_id) {
                return Err(PlannerError::ReferenceNotFound(equals_id));
            }
            let mut used = BTreeSet::new();
            let mut actions = Vec::new();
            let mut reference = equals_id;
            for symbol in &inference.required_symbols {
                let block = overlay
                    .iter()
                    .filter(|e| !task.in_band(e.anchor) && e.symbol == *symbol && !used.contains(&e.id))
                    .map(|e| e.id)
                    .min()
                    .ok_or_else(|| PlannerError::MalformedObservation(format!("no candidate {symbol} block")))?;
                used.insert(block);
                actions.push(Action::Pick { target_id: block });
                actions.push(Action::Place {
                    reference_id: reference,
                    relation: QualitativeRelation::RightOf,
                    offset_scale: 1.0,
                });
                reference = block;
            }
            let rationale = format!(
                "{}; placing {} to the right of ID {equals_id}",
                inference.note,
                inference.required_symbols.iter().map(|s| s.as_char()).collect::<String>()
            );
            return Ok(PlannerResponse { actions, rationale, goal_note: Some(inference.note.clone()) });
        }
    };
    Ok(PlannerResponse {
        actions: vec![Action::Wait { reason }],
        rationale: inference.note.clone(),
        goal_note: None,
    })
}

/// Deterministic, noise-free planner.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePlanner;

impl Planner for OraclePlanner {
    fn name(&self) -> &str {
        "oracle"
    }

    fn plan(&mut self, request: &PlannerRequest) -> Result<PlannerOutput, PlannerError> {
        let inference = oracle_infer_goal(request)?;
        let response = oracle_plan(&inference, &request.overlay, &request.task)?;
        Ok(PlannerOutput { response, injected_fault: None })
    }
}
