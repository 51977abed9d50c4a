//! Event-level planner contract and its implementations.
//!
//! A planner receives an [`EventPayload`] together with the id overlay of
//! the latest observation and returns an ordered list of id-referenced
//! actions drawn from the closed set `{pick, place, wait}`. Free text in a
//! response is carried for logging only.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::EventPayload;
use crate::perception::ObjectMap;
use crate::workspace::{Point, QualitativeRelation, Rect, Symbol, BAND_MAX_Y, BAND_MIN_Y, BLOCK_SIDE};

pub mod faults;
pub mod oracle;
pub mod remote;
pub mod wire;

pub use faults::{perturb, NoisyPlanner, PerturbContext, PlannerFaultConfig, PlannerFaultKind};
pub use oracle::{oracle_infer_goal, oracle_plan, Decision, GoalInference, OraclePlanner};
pub use remote::{RemoteConfig, RemotePlanner};
pub use wire::{parse_reply, write_reply, SchemaErrorKind};

pub const PRIMITIVES: [&str; 3] = ["pick", "place", "wait"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitReason {
    NoSolution,
    InsufficientEvidence,
}

impl WaitReason {
    pub fn as_str(self) -> &'static str {
        match self {
            WaitReason::NoSolution => "no_solution",
            WaitReason::InsufficientEvidence => "insufficient_evidence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Pick { target_id: u32 },
    Place { reference_id: u32, relation: QualitativeRelation, offset_scale: f64 },
    Wait { reason: WaitReason },
}

impl Action {
    pub fn primitive(&self) -> &'static str {
        match self {
            Action::Pick { .. } => "pick",
            Action::Place { .. } => "place",
            Action::Wait { .. } => "wait",
        }
    }

    pub fn referenced_id(&self) -> Option<u32> {
        match *self {
            Action::Pick { target_id } => Some(target_id),
            Action::Place { reference_id, .. } => Some(reference_id),
            Action::Wait { .. } => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Pick { target_id } => write!(f, "pick({target_id})"),
            Action::Place { reference_id, relation, offset_scale } => {
                write!(f, "place({reference_id}, {}, {offset_scale})", relation.as_str())
            }
            Action::Wait { reason } => write!(f, "wait({})", reason.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerResponse {
    pub actions: Vec<Action>,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_note: Option<String>,
}

impl PlannerResponse {
    pub fn wait(reason: WaitReason, rationale: impl Into<String>) -> Self {
        PlannerResponse { actions: vec![Action::Wait { reason }], rationale: rationale.into(), goal_note: None }
    }

    /// The wait reason when the response is a lone wait.
    pub fn wait_reason(&self) -> Option<WaitReason> {
        match self.actions.as_slice() {
            [Action::Wait { reason }] => Some(*reason),
            _ => None,
        }
    }

    pub fn is_wait(&self) -> bool {
        self.wait_reason().is_some()
    }

    /// Ids picked, in plan order.
    pub fn picked_ids(&self) -> Vec<u32> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::Pick { target_id } => Some(*target_id),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerContract {
    pub schema_version: String,
    pub max_actions: usize,
    /// Opaque text forwarded to remote planners.
    pub prompt: String,
}

impl Default for PlannerContract {
    fn default() -> Self {
        PlannerContract {
            schema_version: wire::WIRE_VERSION.to_string(),
            max_actions: 8,
            prompt: String::new(),
        }
    }
}

/// Task layout known to every planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskContext {
    pub expression_band: (f64, f64),
    pub footprint: f64,
}

impl Default for TaskContext {
    fn default() -> Self {
        TaskContext { expression_band: (BAND_MIN_Y, BAND_MAX_Y), footprint: BLOCK_SIDE }
    }
}

impl TaskContext {
    pub fn in_band(&self, p: Point) -> bool {
        p.y >= self.expression_band.0 && p.y <= self.expression_band.1
    }
}

/// What a planner is shown about one object id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayEntry {
    pub id: u32,
    pub symbol: Symbol,
    pub anchor: Point,
    pub bbox: Rect,
}

pub fn overlay_from_map(map: &ObjectMap) -> Vec<OverlayEntry> {
    map.entries
        .iter()
        .map(|(&id, e)| OverlayEntry { id, symbol: e.symbol_estimate, anchor: e.anchor, bbox: e.bbox })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRequest {
    pub payload: EventPayload,
    pub overlay: Vec<OverlayEntry>,
    pub task: TaskContext,
    pub contract: PlannerContract,
}

impl PlannerRequest {
    pub fn new(payload: EventPayload, map: &ObjectMap, contract: PlannerContract) -> Self {
        PlannerRequest { payload, overlay: overlay_from_map(map), task: TaskContext::default(), contract }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("planner timed out after {0:?}")]
    Timeout(Duration),
    #[error("reply violates the plan schema ({kind:?}): {detail}")]
    SchemaViolation { kind: SchemaErrorKind, detail: String },
    #[error("malformed observation: {0}")]
    MalformedObservation(String),
    #[error("reference id {0} not found")]
    ReferenceNotFound(u32),
}

impl PlannerError {
    pub fn schema(kind: SchemaErrorKind, detail: impl Into<String>) -> Self {
        PlannerError::SchemaViolation { kind, detail: detail.into() }
    }
}

/// A response plus the planner fault injected into it, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerOutput {
    pub response: PlannerResponse,
    pub injected_fault: Option<PlannerFaultKind>,
}

pub trait Planner: Send {
    fn name(&self) -> &str;
    fn plan(&mut self, request: &PlannerRequest) -> Result<PlannerOutput, PlannerError>;
}

/// Planner selection, instantiated per trial or per session with a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlannerSpec {
    Oracle,
    Noisy { faults: PlannerFaultConfig },
    Remote { remote: RemoteConfig },
}

impl PlannerSpec {
    pub fn build(&self, seed: u64) -> Box<dyn Planner> {
        match self {
            PlannerSpec::Oracle => Box::new(OraclePlanner),
            PlannerSpec::Noisy { faults } => {
                let mut faults = faults.clone();
                faults.seed = crate::rng::derive(faults.seed ^ seed, "planner");
                Box::new(NoisyPlanner::new(faults))
            }
            PlannerSpec::Remote { remote } => Box::new(RemotePlanner::new(remote.clone())),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PlannerSpec::Oracle => "oracle",
            PlannerSpec::Noisy { .. } => "noisy",
            PlannerSpec::Remote { .. } => "remote",
        }
    }
}
