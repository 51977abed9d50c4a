//! Line-delimited JSON wire format between the controller and a remote
//! planner.
//!
//! Request (one line):
//!
//! ```text
//! {"version":"evassist.plan/1","mode":"proposed",
//!  "observations":{"pre":{..},"post":{..}},
//!  "images":{"pre":"<svg ..>","post":"<svg ..>"},
//!  "id_overlay":[{"id":0,"symbol":"2","anchor":[200,300],"bbox":[180,280,220,320]}],
//!  "task":{"expression_band":[250,350],"footprint":40},
//!  "contract":{"primitives":["pick","place","wait"],"relations":[..],"wait_reasons":[..],
//!              "max_actions":8,"prompt":"..."}}
//! ```
//!
//! Reply (one line):
//!
//! ```text
//! {"version":"evassist.plan/1",
//!  "actions":[{"type":"pick","target_id":4},
//!             {"type":"place","reference_id":1,"relation":"right_of","offset_scale":1.0}],
//!  "rationale":"...", "goal_note":"..."}
//! ```
//!
//! Replies are validated field by field; anything outside the contract is
//! rejected, never repaired.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{Action, PlannerContract, PlannerError, PlannerRequest, PlannerResponse, WaitReason, PRIMITIVES};
use crate::monitor::Snapshot;
use crate::perception::ObjectMap;
use crate::render::render_svg;
use crate::workspace::QualitativeRelation;

pub const WIRE_VERSION: &str = "evassist.plan/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaErrorKind {
    /// Not JSON, or not an object where one is required.
    Malformed,
    VersionMismatch,
    MissingField,
    UnknownField,
    UnknownPrimitive,
    InvalidId,
    InvalidValue,
    WaitMixed,
    TooManyActions,
}

fn violation(kind: SchemaErrorKind, detail: impl Into<String>) -> PlannerError {
    PlannerError::schema(kind, detail)
}

fn observation_json(s: &Snapshot) -> Value {
    json!({
        "frame_index": s.frame_index,
        "timestamp": s.timestamp,
        "stable": s.stable,
        "blocks": s.observation.iter().map(|b| json!({
            "symbol": b.symbol,
            "x": b.pose.x,
            "y": b.pose.y,
            "theta": b.pose.theta,
            "footprint": b.footprint,
        })).collect::<Vec<_>>(),
    })
}

/// Serialises a planner request as one JSON line.
pub fn write_request(request: &PlannerRequest) -> String {
    let p = &request.payload;
    let mut observations = Map::new();
    let mut images = Map::new();
    if let Some(pre) = &p.pre {
        observations.insert("pre".into(), observation_json(pre));
        images.insert("pre".into(), Value::String(render_svg(pre, None)));
    }
    if let Some(post) = &p.post {
        observations.insert("post".into(), observation_json(post));
    }
    if let Some(window) = &p.window {
        observations.insert("window".into(), Value::Array(window.iter().map(observation_json).collect()));
        images.insert(
            "window".into(),
            Value::Array(window.iter().map(|s| Value::String(render_svg(s, None))).collect()),
        );
    }
    if let Some(latest) = p.latest() {
        let map = ObjectMap {
            entries: request
                .overlay
                .iter()
                .map(|e| {
                    (
                        e.id,
                        crate::perception::ObjectMapEntry {
                            bbox: e.bbox,
                            mask: Vec::new(),
                            anchor: e.anchor,
                            grasp: crate::perception::Grasp { point: e.anchor, angle: 0.0 },
                            symbol_estimate: e.symbol,
                            score: 1.0,
                        },
                    )
                })
                .collect(),
            source_frame: latest.frame_index,
        };
        images.insert("latest".into(), Value::String(render_svg(latest, Some(&map))));
    }
    let overlay: Vec<Value> = request
        .overlay
        .iter()
        .map(|e| {
            json!({
                "id": e.id,
                "symbol": e.symbol,
                "anchor": [e.anchor.x, e.anchor.y],
                "bbox": [e.bbox.min_x, e.bbox.min_y, e.bbox.max_x, e.bbox.max_y],
            })
        })
        .collect();
    let mut body = json!({
        "version": WIRE_VERSION,
        "mode": p.mode,
        "observations": observations,
        "images": images,
        "id_overlay": overlay,
        "task": {
            "expression_band": [request.task.expression_band.0, request.task.expression_band.1],
            "footprint": request.task.footprint,
        },
        "contract": {
            "primitives": PRIMITIVES,
            "relations": QualitativeRelation::ALL.iter().map(|r| r.as_str()).collect::<Vec<_>>(),
            "wait_reasons": ["no_solution", "insufficient_evidence"],
            "max_actions": request.contract.max_actions,
            "prompt": request.contract.prompt,
        },
    });
    if let Some(instruction) = &p.instruction {
        body["instruction"] = Value::String(instruction.clone());
    }
    body.to_string()
}

fn action_json(a: &Action) -> Value {
    match *a {
        Action::Pick { target_id } => json!({"type": "pick", "target_id": target_id}),
        Action::Place { reference_id, relation, offset_scale } => json!({
            "type": "place",
            "reference_id": reference_id,
            "relation": relation.as_str(),
            "offset_scale": offset_scale,
        }),
        Action::Wait { reason } => json!({"type": "wait", "reason": reason.as_str()}),
    }
}

/// Serialises a reply as one JSON line.
pub fn write_reply(response: &PlannerResponse) -> String {
    let mut body = json!({
        "version": WIRE_VERSION,
        "actions": response.actions.iter().map(action_json).collect::<Vec<_>>(),
        "rationale": response.rationale,
    });
    if let Some(note) = &response.goal_note {
        body["goal_note"] = Value::String(note.clone());
    }
    body.to_string()
}

fn parse_id(action: &Map<String, Value>, key: &str) -> Result<u32, PlannerError> {
    let value = action.get(key).ok_or_else(|| violation(SchemaErrorKind::MissingField, format!("missing {key}")))?;
    value
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| violation(SchemaErrorKind::InvalidId, format!("{key} must be a non-negative integer, got {value}")))
}

fn check_keys(action: &Map<String, Value>, allowed: &[&str]) -> Result<(), PlannerError> {
    match action.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(violation(SchemaErrorKind::UnknownField, format!("unexpected field {k:?}"))),
        None => Ok(()),
    }
}

fn parse_action(value: &Value) -> Result<Action, PlannerError> {
    let obj = value
        .as_object()
        .ok_or_else(|| violation(SchemaErrorKind::Malformed, "action must be an object"))?;
    let kind = obj.get("type").ok_or_else(|| violation(SchemaErrorKind::MissingField, "missing type"))?;
    let kind = kind
        .as_str()
        .ok_or_else(|| violation(SchemaErrorKind::InvalidValue, "type must be a string"))?;
    match kind {
        "pick" => {
            check_keys(obj, &["type", "target_id"])?;
            Ok(Action::Pick { target_id: parse_id(obj, "target_id")? })
        }
        "place" => {
            check_keys(obj, &["type", "reference_id", "relation", "offset_scale"])?;
            let reference_id = parse_id(obj, "reference_id")?;
            let relation = obj
                .get("relation")
                .ok_or_else(|| violation(SchemaErrorKind::MissingField, "missing relation"))?;
            let relation: QualitativeRelation = relation
                .as_str()
                .ok_or_else(|| violation(SchemaErrorKind::InvalidValue, "relation must be a string"))?
                .parse()
                .map_err(|e: String| violation(SchemaErrorKind::InvalidValue, e))?;
            let scale = obj
                .get("offset_scale")
                .ok_or_else(|| violation(SchemaErrorKind::MissingField, "missing offset_scale"))?;
            let offset_scale = scale
                .as_f64()
                .filter(|s| s.is_finite() && *s > 0.0)
                .ok_or_else(|| violation(SchemaErrorKind::InvalidValue, format!("offset_scale must be positive, got {scale}")))?;
            Ok(Action::Place { reference_id, relation, offset_scale })
        }
        "wait" => {
            check_keys(obj, &["type", "reason"])?;
            let reason = obj.get("reason").ok_or_else(|| violation(SchemaErrorKind::MissingField, "missing reason"))?;
            let reason = match reason.as_str() {
                Some("no_solution") => WaitReason::NoSolution,
                Some("insufficient_evidence") => WaitReason::InsufficientEvidence,
                _ => return Err(violation(SchemaErrorKind::InvalidValue, format!("unknown wait reason {reason}"))),
            };
            Ok(Action::Wait { reason })
        }
        other => Err(violation(SchemaErrorKind::UnknownPrimitive, format!("primitive {other:?} is not allowed"))),
    }
}

/// Parses and validates a planner reply against the contract.
pub fn parse_reply(text: &str, contract: &PlannerContract) -> Result<PlannerResponse, PlannerError> {
    let value: Value = serde_json::from_str(text.trim())
        .map_err(|e| violation(SchemaErrorKind::Malformed, format!("not JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| violation(SchemaErrorKind::Malformed, "reply must be an object"))?;
    check_keys(obj, &["version", "actions", "rationale", "goal_note"])?;
    match obj.get("version") {
        None => return Err(violation(SchemaErrorKind::MissingField, "missing version")),
        Some(Value::String(v)) if *v == contract.schema_version => {}
        Some(v) => return Err(violation(SchemaErrorKind::VersionMismatch, format!("unsupported version {v}"))),
    }
    let actions = obj
        .get("actions")
        .ok_or_else(|| violation(SchemaErrorKind::MissingField, "missing actions"))?
        .as_array()
        .ok_or_else(|| violation(SchemaErrorKind::InvalidValue, "actions must be an array"))?;
    let rationale = match obj.get("rationale") {
        None => return Err(violation(SchemaErrorKind::MissingField, "missing rationale")),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(violation(SchemaErrorKind::InvalidValue, "rationale must be a string")),
    };
    let goal_note = match obj.get("goal_note") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(violation(SchemaErrorKind::InvalidValue, "goal_note must be a string")),
    };
    let actions = actions.iter().map(parse_action).collect::<Result<Vec<_>, _>>()?;
    if actions.len() > 1 && actions.iter().any(|a| matches!(a, Action::Wait { .. })) {
        return Err(violation(SchemaErrorKind::WaitMixed, "wait must be the only action"));
    }
    if actions.len() > contract.max_actions {
        return Err(violation(
            SchemaErrorKind::TooManyActions,
            format!("{} actions exceed the limit of {}", actions.len(), contract.max_actions),
        ));
    }
    Ok(PlannerResponse { actions, rationale, goal_note })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contract() -> PlannerContract {
        PlannerContract::default()
    }

    fn kind(text: &str) -> SchemaErrorKind {
        match parse_reply(text, &contract()) {
            Err(PlannerError::SchemaViolation { kind, .. }) => kind,
            other => panic!("expected schema violation, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_two_plus_three_plan() {
        let plan = PlannerResponse {
            actions: vec![
                Action::Pick { target_id: 4 },
                Action::Place { reference_id: 1, relation: QualitativeRelation::RightOf, offset_scale: 1.0 },
            ],
            rationale: "2+3= needs 5".into(),
            goal_note: Some("complete 2+3=".into()),
        };
        let line = write_reply(&plan);
        assert!(!line.contains('\n'));
        assert_eq!(parse_reply(&line, &contract()).unwrap(), plan);
    }

    #[test]
    fn rejects_contract_violations() {
        let v = WIRE_VERSION;
        assert_eq!(
            kind(&format!(r#"{{"version":"{v}","actions":[{{"type":"push","target_id":1}}],"rationale":""}}"#)),
            SchemaErrorKind::UnknownPrimitive
        );
        assert_eq!(
            kind(&format!(r#"{{"version":"{v}","actions":[{{"type":"pick","target_id":"five"}}],"rationale":""}}"#)),
            SchemaErrorKind::InvalidId
        );
        assert_eq!(
            kind(&format!(r#"{{"version":"{v}","actions":[{{"type":"pick","target_id":1.5}}],"rationale":""}}"#)),
            SchemaErrorKind::InvalidId
        );
        assert_eq!(
            kind(&format!(
                r#"{{"version":"{v}","actions":[{{"type":"pick","target_id":1}},{{"type":"wait","reason":"no_solution"}}],"rationale":""}}"#
            )),
            SchemaErrorKind::WaitMixed
        );
        assert_eq!(
            kind(&format!(r#"{{"version":"{v}","actions":[{{"type":"place","reference_id":1,"relation":"right_of"}}],"rationale":""}}"#)),
            SchemaErrorKind::MissingField
        );
        assert_eq!(kind(r#"{"actions":[],"rationale":""}"#), SchemaErrorKind::MissingField);
        assert_eq!(kind(r#"{"version":"v0","actions":[],"rationale":""}"#), SchemaErrorKind::VersionMismatch);
        assert_eq!(kind("pick(4)"), SchemaErrorKind::Malformed);
    }

    #[test]
    fn empty_action_list_is_schema_valid() {
        let r = parse_reply(&format!(r#"{{"version":"{WIRE_VERSION}","actions":[],"rationale":"x"}}"#), &contract()).unwrap();
        assert!(r.actions.is_empty());
    }
}
