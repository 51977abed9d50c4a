//! Local post-processing of planner output: validation, grounding into
//! robot-frame targets, simulated execution, outcome verification and the
//! bounded retry / recovery loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::{MonitorConfig, Snapshot};
use crate::perception::{perceive, ObjectMap, PerceptionNoiseConfig};
use crate::planner::{
    overlay_from_map, Action, Planner, PlannerContract, PlannerError, PlannerFaultKind, PlannerRequest,
    PlannerResponse, WaitReason,
};
use crate::rng;
use crate::workspace::{
    apply_mutation, relation_between, Mutation, Point, Pose, QualitativeRelation, Rect, RelationTolerance, Scene,
    WorkspaceError, BLOCK_SIDE,
};

/// Gap added between a reference block and a placed neighbour (mm).
pub const INTER_BLOCK_GAP: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("plan references unknown id {0}")]
    MissingId(u32),
    #[error("action {index} is infeasible: {reason}")]
    InfeasibleAction { index: usize, reason: String },
    #[error("plan is empty")]
    EmptyPlan,
    #[error("simulated collision: {0}")]
    SimCollisionFatal(String),
}

/// Planar similarity from the image frame to the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationTransform {
    pub rotation: f64,
    pub translation: Point,
    pub scale: f64,
}

impl Default for CalibrationTransform {
    fn default() -> Self {
        CalibrationTransform { rotation: 0.0, translation: Point::new(0.0, 0.0), scale: 1.0 }
    }
}

impl CalibrationTransform {
    pub fn new(rotation: f64, translation: Point, scale: f64) -> Result<Self, String> {
        if !(scale.is_finite() && scale != 0.0) {
            return Err("calibration scale must be finite and non-zero".into());
        }
        Ok(CalibrationTransform { rotation, translation, scale })
    }

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        Point::new(
            self.scale * (c * p.x - s * p.y) + self.translation.x,
            self.scale * (s * p.x + c * p.y) + self.translation.y,
        )
    }

    pub fn invert(&self, q: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let d = (q - self.translation) * (1.0 / self.scale);
        Point::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }
}

/// Geometry and limits the controller checks plans against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionGeometry {
    pub workspace_bounds: Rect,
    pub gap: f64,
    pub tolerance: RelationTolerance,
    pub max_actions: usize,
}

impl Default for ExecutionGeometry {
    fn default() -> Self {
        ExecutionGeometry {
            workspace_bounds: Scene::empty().workspace_bounds,
            gap: INTER_BLOCK_GAP,
            tolerance: RelationTolerance::for_footprint(BLOCK_SIDE),
            max_actions: PlannerContract::default().max_actions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedPlan {
    pub actions: Vec<Action>,
}

impl ValidatedPlan {
    pub fn is_wait(&self) -> bool {
        matches!(self.actions.as_slice(), [Action::Wait { .. }])
    }
}

/// Image-frame step length for `relation` around an entry's bbox.
fn unit_step(bbox: &Rect, relation: QualitativeRelation, gap: f64) -> f64 {
    let extent = if relation.is_horizontal() { bbox.width() } else { bbox.height() };
    extent + gap
}

/// Image-frame placement target for a place action around `reference`.
pub fn placement_point(reference_anchor: Point, reference_bbox: &Rect, relation: QualitativeRelation, offset_scale: f64, gap: f64) -> Point {
    reference_anchor + relation.direction() * (offset_scale * unit_step(reference_bbox, relation, gap))
}

/// Accepts the plan only if every primitive, id and placement is
/// executable against `map`; never repairs it.
pub fn validate_plan(response: &PlannerResponse, map: &ObjectMap, geometry: &ExecutionGeometry) -> Result<ValidatedPlan, ExecError> {
    let actions = &response.actions;
    if actions.is_empty() {
        return Err(ExecError::EmptyPlan);
    }
    if actions.len() > geometry.max_actions {
        return Err(ExecError::InfeasibleAction {
            index: geometry.max_actions,
            reason: format!("plan has {} actions, limit is {}", actions.len(), geometry.max_actions),
        });
    }
    if let [Action::Wait { .. }] = actions.as_slice() {
        return Ok(ValidatedPlan { actions: actions.clone() });
    }
    for action in actions {
        if let Some(id) = action.referenced_id() {
            if !map.contains(id) {
                return Err(ExecError::MissingId(id));
            }
        }
    }
    let mut planned = map.clone();
    let mut held: Option<u32> = None;
    for (index, action) in actions.iter().enumerate() {
        let infeasible = |reason: &str| ExecError::InfeasibleAction { index, reason: reason.to_string() };
        match *action {
            Action::Wait { .. } => return Err(infeasible("wait cannot be combined with other actions")),
            Action::Pick { target_id } => {
                if held == Some(target_id) {
                    return Err(infeasible("target is already held"));
                }
                if held.is_some() {
                    return Err(infeasible("gripper is already holding a block"));
                }
                held = Some(target_id);
            }
            Action::Place { reference_id, relation, offset_scale } => {
                let Some(subject) = held.take() else {
                    return Err(infeasible("place without a preceding pick"));
                };
                if reference_id == subject {
                    return Err(infeasible("reference is the held block"));
                }
                let reference = &planned.entries[&reference_id];
                let target = placement_point(reference.anchor, &reference.bbox, relation, offset_scale, geometry.gap);
                let held_box = planned.entries[&subject].bbox;
                let rect = Rect::centered(target, held_box.width(), held_box.height());
                if !geometry.workspace_bounds.contains_rect(&rect) {
                    return Err(infeasible("placement leaves the workspace"));
                }
                let blocked = planned
                    .entries
                    .iter()
                    .filter(|(id, _)| **id != subject)
                    .any(|(_, e)| e.bbox.overlaps(&rect));
                if blocked {
                    return Err(infeasible("placement overlaps another block"));
                }
                let entry = planned.entries.get_mut(&subject).expect("validated id");
                move_entry(entry, target);
            }
        }
    }
    if held.is_some() {
        return Err(ExecError::InfeasibleAction { index: actions.len() - 1, reason: "plan ends holding a block".into() });
    }
    Ok(ValidatedPlan { actions: actions.clone() })
}

fn move_entry(entry: &mut crate::perception::ObjectMapEntry, target: Point) {
    let d = target - entry.anchor;
    entry.anchor = target;
    entry.grasp.point = entry.grasp.point + d;
    entry.bbox = Rect::new(entry.bbox.min_x + d.x, entry.bbox.min_y + d.y, entry.bbox.max_x + d.x, entry.bbox.max_y + d.y);
    for p in &mut entry.mask {
        *p = *p + d;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundedTarget {
    Grasp { point: Point, angle: f64, image_point: Point },
    Place {
        point: Point,
        image_point: Point,
        subject_id: u32,
        reference_anchor: Point,
    },
    Wait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedAction {
    pub action: Action,
    pub target: GroundedTarget,
}

impl GroundedAction {
    /// Robot-frame target point, when the action moves the arm.
    pub fn robot_point(&self) -> Option<Point> {
        match self.target {
            GroundedTarget::Grasp { point, .. } | GroundedTarget::Place { point, .. } => Some(point),
            GroundedTarget::Wait => None,
        }
    }
}

pub fn ground_pick(action: &Action, map: &ObjectMap, calibration: &CalibrationTransform) -> Result<GroundedAction, ExecError> {
    let Action::Pick { target_id } = *action else {
        return Err(ExecError::InfeasibleAction { index: 0, reason: format!("{action} is not a pick") });
    };
    let entry = map.get(target_id).ok_or(ExecError::MissingId(target_id))?;
    Ok(GroundedAction {
        action: *action,
        target: GroundedTarget::Grasp {
            point: calibration.apply(entry.grasp.point),
            angle: entry.grasp.angle + calibration.rotation,
            image_point: entry.grasp.point,
        },
    })
}

/// Grounds a place action. `subject_id` is the block being carried.
pub fn ground_place(
    action: &Action,
    subject_id: u32,
    map: &ObjectMap,
    calibration: &CalibrationTransform,
    geometry: &ExecutionGeometry,
) -> Result<GroundedAction, ExecError> {
    let Action::Place { reference_id, relation, offset_scale } = *action else {
        return Err(ExecError::InfeasibleAction { index: 0, reason: format!("{action} is not a place") });
    };
    let reference = map.get(reference_id).ok_or(ExecError::MissingId(reference_id))?;
    let image_point = placement_point(reference.anchor, &reference.bbox, relation, offset_scale, geometry.gap);
    Ok(GroundedAction {
        action: *action,
        target: GroundedTarget::Place {
            point: calibration.apply(image_point),
            image_point,
            subject_id,
            reference_anchor: reference.anchor,
        },
    })
}

/// Grounds every action, tracking where earlier placements put blocks.
pub fn ground_plan(
    plan: &ValidatedPlan,
    map: &ObjectMap,
    calibration: &CalibrationTransform,
    geometry: &ExecutionGeometry,
) -> Result<Vec<GroundedAction>, ExecError> {
    let mut planned = map.clone();
    let mut held = None;
    let mut out = Vec::with_capacity(plan.actions.len());
    for (index, action) in plan.actions.iter().enumerate() {
        match action {
            Action::Wait { .. } => out.push(GroundedAction { action: *action, target: GroundedTarget::Wait }),
            Action::Pick { target_id } => {
                out.push(ground_pick(action, &planned, calibration)?);
                held = Some(*target_id);
            }
            Action::Place { .. } => {
                let subject = held.take().ok_or_else(|| ExecError::InfeasibleAction {
                    index,
                    reason: "place without a preceding pick".into(),
                })?;
                let grounded = ground_place(action, subject, &planned, calibration, geometry)?;
                if let GroundedTarget::Place { image_point, .. } = grounded.target {
                    if let Some(entry) = planned.entries.get_mut(&subject) {
                        move_entry(entry, image_point);
                    }
                }
                out.push(grounded);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionFaultConfig {
    pub p_place_miss: f64,
    pub place_error_sigma: f64,
    pub p_collision: f64,
    pub seed: u64,
}

impl Default for ExecutionFaultConfig {
    fn default() -> Self {
        ExecutionFaultConfig { p_place_miss: 0.0, place_error_sigma: 0.0, p_collision: 0.0, seed: 0 }
    }
}

impl ExecutionFaultConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("p_place_miss", self.p_place_miss), ("p_collision", self.p_collision)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.place_error_sigma >= 0.0) {
            return Err("place_error_sigma must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecFault {
    PlaceMiss,
    Collision,
}

/// One line of the execution trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_fault: Option<ExecFault>,
    pub result: String,
}

pub fn write_trace(records: &[TraceRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("trace record serialises") + "\n")
        .collect()
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionFailure {
    pub error: ExecError,
    pub scene: Scene,
    pub trace: Vec<TraceRecord>,
}

/// Simulates the arm executing `plan` on `scene`. `calibration` maps the
/// scene (image) frame to the robot frame the targets are expressed in.
pub fn execute(
    plan: &[GroundedAction],
    scene: &Scene,
    faults: &ExecutionFaultConfig,
    calibration: &CalibrationTransform,
    tolerance: &RelationTolerance,
    rng: &mut ChaCha8Rng,
) -> Result<(Scene, Vec<TraceRecord>), ExecutionFailure> {
    let mut scene = scene.clone();
    let mut trace = Vec::new();
    let mut held: Option<u32> = None;
    let noise = Normal::new(0.0, faults.place_error_sigma.max(0.0)).ok();
    for (step, grounded) in plan.iter().enumerate() {
        let mut record = TraceRecord {
            step,
            action: grounded.action.to_string(),
            target: grounded.robot_point().map(|p| [p.x, p.y]),
            injected_fault: None,
            result: String::new(),
        };
        match &grounded.target {
            GroundedTarget::Wait => record.result = "waited".into(),
            GroundedTarget::Grasp { point, .. } => {
                let at = calibration.invert(*point);
                match scene.block_at(at).map(|b| (b.block_id, b.pose)) {
                    Some((id, pose)) if held.is_none() => {
                        scene = apply_mutation(&scene, &Mutation::lift(id, pose)).expect("lift never fails");
                        held = Some(id);
                        record.result = format!("grasped block {id}");
                    }
                    Some(_) => record.result = "gripper busy".into(),
                    None => record.result = "grasp missed".into(),
                }
            }
            GroundedTarget::Place { point, .. } => {
                let Some(id) = held.take() else {
                    record.result = "nothing held".into();
                    trace.push(record);
                    continue;
                };
                let target = calibration.invert(*point);
                let draws: [f64; 3] = [rng.random(), rng.random(), rng.random()];
                let mut pose = Pose::new(target.x, target.y, 0.0);
                if draws[0] < faults.p_place_miss {
                    record.injected_fault = Some(ExecFault::PlaceMiss);
                    let axis = match grounded.action {
                        Action::Place { relation, .. } => relation.direction(),
                        _ => Point::new(1.0, 0.0),
                    };
                    let perp = Point::new(-axis.y, axis.x);
                    let extra = noise.map_or(0.0, |n| n.sample(rng).abs());
                    let magnitude = 1.5 * tolerance.max_perp + extra;
                    let sign = if draws[1] < 0.5 { -1.0 } else { 1.0 };
                    let off = perp * (sign * magnitude);
                    pose.x += off.x;
                    pose.y += off.y;
                } else if let Some(n) = noise.filter(|_| faults.place_error_sigma > 0.0) {
                    pose.x += n.sample(rng);
                    pose.y += n.sample(rng);
                }
                let placed = apply_mutation(&scene, &Mutation { block_id: id, to: crate::workspace::Placement::Table { pose } })
                    .or_else(|_| apply_mutation(&scene, &Mutation::place(id, target.x, target.y)));
                match placed {
                    Ok(next) => {
                        scene = next;
                        record.result = format!("placed block {id} at ({:.1}, {:.1})", scene.blocks[&id].pose.x, scene.blocks[&id].pose.y);
                    }
                    Err(e) => {
                        record.result = format!("placement blocked: {e}");
                        trace.push(record);
                        return Err(ExecutionFailure {
                            error: ExecError::SimCollisionFatal(e.to_string()),
                            scene,
                            trace,
                        });
                    }
                }
                if draws[2] < faults.p_collision {
                    if let Some(result) = disturb_neighbour(&mut scene, id, rng, faults.place_error_sigma) {
                        record.injected_fault = Some(ExecFault::Collision);
                        record.result.push_str(&format!("; {result}"));
                    }
                }
            }
        }
        trace.push(record);
    }
    if let Some(id) = held {
        return Err(ExecutionFailure {
            error: ExecError::SimCollisionFatal(format!("block {id} still held after the plan")),
            scene,
            trace,
        });
    }
    Ok((scene, trace))
}

fn disturb_neighbour(scene: &mut Scene, placed: u32, rng: &mut ChaCha8Rng, sigma: f64) -> Option<String> {
    let at = scene.blocks[&placed].anchor();
    let neighbour = scene
        .on_table()
        .filter(|b| b.block_id != placed)
        .min_by(|a, b| a.anchor().distance(at).total_cmp(&b.anchor().distance(at)))
        .map(|b| (b.block_id, b.pose))?;
    let angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let magnitude = 3.0 * sigma + 5.0;
    let pose = Pose::new(neighbour.1.x + magnitude * angle.cos(), neighbour.1.y + magnitude * angle.sin(), neighbour.1.theta);
    let next = apply_mutation(scene, &Mutation { block_id: neighbour.0, to: crate::workspace::Placement::Table { pose } }).ok()?;
    *scene = next;
    Some(format!("knocked block {} by {magnitude:.1} mm", neighbour.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementCheck {
    pub step: usize,
    pub relation: QualitativeRelation,
    pub offset_scale: f64,
    /// Refreshed-map id of the placed block, if it was found.
    pub subject: Option<u32>,
    /// Refreshed-map id of the reference, if it was found.
    pub reference: Option<u32>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub checks: Vec<PlacementCheck>,
    pub pass: bool,
    pub violated_relations: Vec<QualitativeRelation>,
}

fn nearest(map: &ObjectMap, p: Point, radius: f64, exclude: &BTreeSet<u32>) -> Option<u32> {
    map.entries
        .iter()
        .filter(|(id, _)| !exclude.contains(id))
        .map(|(&id, e)| (id, e.anchor.distance(p)))
        .filter(|(_, d)| *d <= radius)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(id, _)| id)
}

/// Re-identifies every placed block and its reference in the refreshed
/// map and checks the planned relation between them.
pub fn verify_outcome(plan: &[GroundedAction], refreshed: &ObjectMap, geometry: &ExecutionGeometry) -> Verdict {
    let radius = 1.5 * BLOCK_SIDE;
    let mut checks = Vec::new();
    for (step, grounded) in plan.iter().enumerate() {
        let (Action::Place { relation, offset_scale, .. }, GroundedTarget::Place { image_point, reference_anchor, .. }) =
            (grounded.action, &grounded.target)
        else {
            continue;
        };
        let reference = nearest(refreshed, *reference_anchor, radius, &BTreeSet::new());
        let exclude: BTreeSet<u32> = reference.into_iter().collect();
        let subject = nearest(refreshed, *image_point, radius, &exclude);
        let holds = match (subject, reference) {
            (Some(s), Some(r)) => relation_between(refreshed.entries[&s].anchor, refreshed.entries[&r].anchor, relation, geometry.tolerance),
            _ => false,
        };
        checks.push(PlacementCheck { step, relation, offset_scale, subject, reference, holds });
    }
    let violated_relations = checks.iter().filter(|c| !c.holds).map(|c| c.relation).collect::<Vec<_>>();
    Verdict { pass: violated_relations.is_empty(), checks, violated_relations }
}

/// Everything a response phase needs besides the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub retry_limit: u32,
    /// Ask the planner again after a failed verification instead of
    /// re-executing the corrective steps.
    pub replan_on_failure: bool,
    pub calibration: CalibrationTransform,
    pub geometry: ExecutionGeometry,
    pub execution_faults: ExecutionFaultConfig,
    pub perception: PerceptionNoiseConfig,
    pub monitor: MonitorConfig,
    pub contract: PlannerContract,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            retry_limit: 2,
            replan_on_failure: false,
            calibration: CalibrationTransform::default(),
            geometry: ExecutionGeometry::default(),
            execution_faults: ExecutionFaultConfig::default(),
            perception: PerceptionNoiseConfig::default(),
            monitor: MonitorConfig::default(),
            contract: PlannerContract::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PhaseOutcome {
    /// Plan executed and verified.
    Completed,
    /// Planner chose to wait; nothing moved.
    Waited { reason: WaitReason },
    /// Planner call failed; nothing moved.
    PlannerFailed { error: String, schema: bool },
    /// Plan rejected by validation; nothing moved.
    Rejected { error: String },
    /// Execution or verification failed after all retries.
    ExecutionFailed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub outcome: PhaseOutcome,
    pub response: Option<PlannerResponse>,
    pub injected_planner_fault: Option<PlannerFaultKind>,
    pub planner_calls: u32,
    pub retries: u32,
    pub verdicts: Vec<Verdict>,
    pub trace: Vec<TraceRecord>,
    pub scene: Scene,
    pub recovery_executed: bool,
}

impl PhaseResult {
    pub fn succeeded(&self) -> bool {
        matches!(self.outcome, PhaseOutcome::Completed | PhaseOutcome::Waited { .. })
    }
}

/// Candidate parking cells, scanned in order, for the recovery deposit.
fn safe_cells(bounds: &Rect) -> impl Iterator<Item = Point> + '_ {
    let step = BLOCK_SIDE + 2.0 * INTER_BLOCK_GAP;
    let margin = BLOCK_SIDE;
    let rows = [bounds.max_y - margin, bounds.min_y + margin];
    rows.into_iter().flat_map(move |y| {
        let count = ((bounds.width() - 2.0 * margin) / step).floor() as usize + 1;
        (0..count).map(move |k| Point::new(bounds.max_x - margin - k as f64 * step, y))
    })
}

/// Puts every held block down at the first free safe cell.
pub fn recover(scene: &Scene) -> Scene {
    let mut scene = scene.clone();
    let held: Vec<u32> = scene.held().map(|b| b.block_id).collect();
    for id in held {
        let bounds = scene.workspace_bounds;
        let next = safe_cells(&bounds).find_map(|p| apply_mutation(&scene, &Mutation::place(id, p.x, p.y)).ok());
        scene = match next {
            Some(s) => s,
            None => apply_mutation(&scene, &Mutation { block_id: id, to: crate::workspace::Placement::OffTable })
                .expect("known id"),
        };
    }
    scene
}

fn refreshed_map(scene: &Scene, config: &PhaseConfig) -> ObjectMap {
    perceive(&Snapshot::capture(scene, 0.0, &config.monitor), &config.perception)
}

/// Corrective pick/place pairs for failed checks, over the refreshed map.
fn corrective_plan(verdict: &Verdict) -> Option<PlannerResponse> {
    let mut actions = Vec::new();
    for check in verdict.checks.iter().filter(|c| !c.holds) {
        let (Some(subject), Some(reference)) = (check.subject, check.reference) else {
            return None;
        };
        actions.push(Action::Pick { target_id: subject });
        actions.push(Action::Place { reference_id: reference, relation: check.relation, offset_scale: check.offset_scale });
    }
    (!actions.is_empty()).then(|| PlannerResponse { actions, rationale: "retry".into(), goal_note: None })
}

/// Plan, validate, ground, execute and verify one robot turn.
pub fn run_response_phase(
    request: &PlannerRequest,
    planner: &mut dyn Planner,
    map: &ObjectMap,
    scene: &Scene,
    config: &PhaseConfig,
    seed: u64,
) -> PhaseResult {
    let mut exec_rng = rng::stream(seed ^ config.execution_faults.seed, "execution");
    let mut result = PhaseResult {
        outcome: PhaseOutcome::Completed,
        response: None,
        injected_planner_fault: None,
        planner_calls: 1,
        retries: 0,
        verdicts: Vec::new(),
        trace: Vec::new(),
        scene: scene.clone(),
        recovery_executed: false,
    };
    let output = match planner.plan(request) {
        Ok(o) => o,
        Err(e) => {
            let schema = matches!(e, PlannerError::SchemaViolation { .. });
            result.outcome = PhaseOutcome::PlannerFailed { error: e.to_string(), schema };
            return result;
        }
    };
    result.injected_planner_fault = output.injected_fault;
    result.response = Some(output.response.clone());
    let mut response = output.response;
    let mut map = map.clone();
    let mut attempt = 0u32;
    loop {
        let plan = match validate_plan(&response, &map, &config.geometry) {
            Ok(p) => p,
            Err(e) => {
                result.outcome = if attempt == 0 {
                    PhaseOutcome::Rejected { error: e.to_string() }
                } else {
                    PhaseOutcome::ExecutionFailed { error: e.to_string() }
                };
                break;
            }
        };
        if let [Action::Wait { reason }] = plan.actions.as_slice() {
            result.outcome = if attempt == 0 {
                PhaseOutcome::Waited { reason: *reason }
            } else {
                PhaseOutcome::ExecutionFailed { error: "re-planning produced a wait".into() }
            };
            break;
        }
        let grounded = match ground_plan(&plan, &map, &config.calibration, &config.geometry) {
            Ok(g) => g,
            Err(e) => {
                result.outcome = PhaseOutcome::ExecutionFailed { error: e.to_string() };
                break;
            }
        };
        let step_offset = result.trace.len();
        match execute(&grounded, &result.scene, &config.execution_faults, &config.calibration, &config.geometry.tolerance, &mut exec_rng) {
            Ok((next, trace)) => {
                result.scene = next;
                result.trace.extend(trace.into_iter().map(|mut r| {
                    r.step += step_offset;
                    r
                }));
            }
            Err(failure) => {
                result.scene = failure.scene;
                result.trace.extend(failure.trace.into_iter().map(|mut r| {
                    r.step += step_offset;
                    r
                }));
                result.outcome = PhaseOutcome::ExecutionFailed { error: failure.error.to_string() };
                break;
            }
        }
        let refreshed = refreshed_map(&result.scene, config);
        let verdict = verify_outcome(&grounded, &refreshed, &config.geometry);
        let passed = verdict.pass;
        result.verdicts.push(verdict.clone());
        if passed {
            result.outcome = PhaseOutcome::Completed;
            break;
        }
        if attempt >= config.retry_limit {
            result.outcome = PhaseOutcome::ExecutionFailed { error: "verification failed after retries".into() };
            break;
        }
        attempt += 1;
        result.retries = attempt;
        map = refreshed;
        if config.replan_on_failure {
            let snapshot = Snapshot::capture(&result.scene, 0.0, &config.monitor);
            let payload = crate::monitor::build_payload(crate::monitor::TriggerMode::PostOnly, None, Some(snapshot), None, None)
                .expect("post-only payload");
            let retry_request = PlannerRequest {
                payload,
                overlay: overlay_from_map(&map),
                task: request.task,
                contract: request.contract.clone(),
            };
            result.planner_calls += 1;
            response = match planner.plan(&retry_request) {
                Ok(o) => o.response,
                Err(e) => {
                    result.outcome = PhaseOutcome::ExecutionFailed { error: e.to_string() };
                    break;
                }
            };
        } else {
            match corrective_plan(&verdict) {
                Some(r) => response = r,
                None => {
                    result.outcome = PhaseOutcome::ExecutionFailed { error: "placed block could not be recovered".into() };
                    break;
                }
            }
        }
    }
    if matches!(result.outcome, PhaseOutcome::ExecutionFailed { .. }) {
        if result.scene.held().next().is_some() {
            result.scene = recover(&result.scene);
        }
        result.recovery_executed = true;
    }
    result
}

/// Ground-truth block under each map entry's anchor.
pub fn resolve_truth(map: &ObjectMap, scene: &Scene) -> BTreeMap<u32, u32> {
    map.entries
        .iter()
        .filter_map(|(&id, e)| scene.block_at(e.anchor).map(|b| (id, b.block_id)))
        .collect()
}

impl From<WorkspaceError> for ExecError {
    fn from(e: WorkspaceError) -> Self {
        ExecError::SimCollisionFatal(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::build_object_map;
    use crate::perception::Detection;
    use crate::workspace::{BlockInstance, Symbol, Zone};

    fn det(c: char, x: f64, y: f64) -> Detection {
        let center = Point::new(x, y);
        let bbox = Rect::centered(center, 40.0, 40.0);
        Detection {
            bbox,
            mask: vec![
                Point::new(bbox.min_x, bbox.min_y),
                Point::new(bbox.max_x, bbox.min_y),
                Point::new(bbox.max_x, bbox.max_y),
                Point::new(bbox.min_x, bbox.max_y),
            ],
            score: 1.0,
            symbol_estimate: Symbol::from_char(c).unwrap(),
        }
    }

    // ids in scan order: 0 '2', 1 '+', 2 '3', 3 '=', 4 '5', 5 '7'
    fn layout() -> (Scene, ObjectMap) {
        let blocks = [('2', 350.0, 300.0), ('+', 395.0, 300.0), ('3', 440.0, 300.0), ('=', 500.0, 300.0), ('5', 300.0, 450.0), ('7', 400.0, 450.0)];
        let scene = Scene::new(
            blocks
                .iter()
                .enumerate()
                .map(|(i, &(c, x, y))| BlockInstance {
                    block_id: i as u32 + 10,
                    symbol: Symbol::from_char(c).unwrap(),
                    pose: Pose::new(x, y, 0.0),
                    footprint: 40.0,
                    zone: if y == 300.0 { Zone::ExpressionRow } else { Zone::CandidateTray },
                })
                .collect(),
        )
        .unwrap();
        let map = build_object_map(&blocks.iter().map(|&(c, x, y)| det(c, x, y)).collect::<Vec<_>>(), 0);
        (scene, map)
    }

    fn plan(actions: Vec<Action>) -> PlannerResponse {
        PlannerResponse { actions, rationale: String::new(), goal_note: None }
    }

    fn right_of(reference_id: u32, offset_scale: f64) -> Action {
        Action::Place { reference_id, relation: QualitativeRelation::RightOf, offset_scale }
    }

    #[test]
    fn validation_examples() {
        let (_, map) = layout();
        let g = ExecutionGeometry::default();
        assert!(validate_plan(&plan(vec![Action::Pick { target_id: 4 }, right_of(3, 1.0)]), &map, &g).is_ok());
        assert_eq!(validate_plan(&plan(vec![Action::Pick { target_id: 99 }]), &map, &g), Err(ExecError::MissingId(99)));
        assert!(matches!(
            validate_plan(&plan(vec![right_of(3, 1.0)]), &map, &g),
            Err(ExecError::InfeasibleAction { index: 0, .. })
        ));
        assert_eq!(validate_plan(&plan(vec![]), &map, &g), Err(ExecError::EmptyPlan));
        // right of '+' lands on '3'
        assert!(matches!(
            validate_plan(&plan(vec![Action::Pick { target_id: 4 }, right_of(1, 1.0)]), &map, &g),
            Err(ExecError::InfeasibleAction { .. })
        ));
        // trailing pick
        assert!(validate_plan(&plan(vec![Action::Pick { target_id: 4 }]), &map, &g).is_err());
        // picking twice without placing
        assert!(validate_plan(&plan(vec![Action::Pick { target_id: 4 }, Action::Pick { target_id: 4 }]), &map, &g).is_err());
        // off the table
        assert!(validate_plan(&plan(vec![Action::Pick { target_id: 4 }, right_of(3, 20.0)]), &map, &g).is_err());
    }

    #[test]
    fn chained_placements_validate() {
        let (_, map) = layout();
        let g = ExecutionGeometry::default();
        let p = plan(vec![Action::Pick { target_id: 4 }, right_of(3, 1.0), Action::Pick { target_id: 5 }, right_of(4, 1.0)]);
        assert!(validate_plan(&p, &map, &g).is_ok());
    }

    #[test]
    fn grounding_examples() {
        let map = build_object_map(&[det('5', 500.0, 300.0), det('1', 100.0, 50.0)], 0);
        let pick5 = Action::Pick { target_id: 1 };
        let id = CalibrationTransform::default();
        let g = ground_pick(&pick5, &map, &id).unwrap();
        assert_eq!(g.robot_point(), Some(Point::new(500.0, 300.0)));
        let shifted = CalibrationTransform::new(0.0, Point::new(10.0, 0.0), 1.0).unwrap();
        assert_eq!(ground_pick(&pick5, &map, &shifted).unwrap().robot_point(), Some(Point::new(510.0, 300.0)));
        let doubled = CalibrationTransform::new(0.0, Point::new(0.0, 0.0), 2.0).unwrap();
        assert_eq!(ground_pick(&Action::Pick { target_id: 0 }, &map, &doubled).unwrap().robot_point(), Some(Point::new(200.0, 100.0)));
        assert_eq!(ground_pick(&Action::Pick { target_id: 7 }, &map, &id), Err(ExecError::MissingId(7)));
    }

    #[test]
    fn place_grounding_examples() {
        let map = build_object_map(&[det('=', 500.0, 300.0)], 0);
        let id = CalibrationTransform::default();
        let g = ExecutionGeometry::default();
        let at = |a: Action, geom: &ExecutionGeometry| ground_place(&a, 9, &map, &id, geom).unwrap().robot_point().unwrap();
        assert_eq!(at(right_of(0, 1.0), &g), Point::new(545.0, 300.0));
        assert_eq!(at(right_of(0, 2.0), &g), Point::new(590.0, 300.0));
        let no_gap = ExecutionGeometry { gap: 0.0, ..g };
        let above = Action::Place { reference_id: 0, relation: QualitativeRelation::Above, offset_scale: 1.0 };
        assert_eq!(at(above, &no_gap), Point::new(500.0, 260.0));
    }

    #[test]
    fn calibration_round_trip() {
        let c = CalibrationTransform::new(0.3, Point::new(-120.0, 45.0), 1.7).unwrap();
        let p = Point::new(321.5, 77.25);
        let back = c.invert(c.apply(p));
        assert!(back.distance(p) < 1e-9);
        assert!(CalibrationTransform::new(0.0, Point::default(), 0.0).is_err());
    }

    #[test]
    fn exact_execution_and_verification() {
        let (scene, map) = layout();
        let cfg = PhaseConfig::default();
        let p = validate_plan(&plan(vec![Action::Pick { target_id: 4 }, right_of(3, 1.0)]), &map, &cfg.geometry).unwrap();
        let grounded = ground_plan(&p, &map, &cfg.calibration, &cfg.geometry).unwrap();
        let (next, trace) = execute(&grounded, &scene, &cfg.execution_faults, &cfg.calibration, &cfg.geometry.tolerance, &mut rng::stream(0, "t")).unwrap();
        assert_eq!(next.blocks[&14].pose.position(), Point::new(545.0, 300.0));
        assert_eq!(next.blocks[&14].zone, Zone::ExpressionRow);
        assert_eq!(trace.len(), 2);
        let verdict = verify_outcome(&grounded, &refreshed_map(&next, &cfg), &cfg.geometry);
        assert!(verdict.pass);
    }

    #[test]
    fn forced_miss_fails_verification() {
        let (scene, map) = layout();
        let mut cfg = PhaseConfig::default();
        cfg.execution_faults.p_place_miss = 1.0;
        let p = validate_plan(&plan(vec![Action::Pick { target_id: 4 }, right_of(3, 1.0)]), &map, &cfg.geometry).unwrap();
        let grounded = ground_plan(&p, &map, &cfg.calibration, &cfg.geometry).unwrap();
        let (next, trace) = execute(&grounded, &scene, &cfg.execution_faults, &cfg.calibration, &cfg.geometry.tolerance, &mut rng::stream(0, "t")).unwrap();
        let placed = next.blocks[&14].pose.position();
        assert!(placed.distance(Point::new(545.0, 300.0)) >= cfg.geometry.tolerance.max_perp);
        assert_eq!(trace[1].injected_fault, Some(ExecFault::PlaceMiss));
        let verdict = verify_outcome(&grounded, &refreshed_map(&next, &cfg), &cfg.geometry);
        assert!(!verdict.pass);
        assert_eq!(verdict.violated_relations, vec![QualitativeRelation::RightOf]);
    }

    #[test]
    fn missing_reference_fails_verification() {
        let (scene, map) = layout();
        let cfg = PhaseConfig::default();
        let p = validate_plan(&plan(vec![Action::Pick { target_id: 4 }, right_of(3, 1.0)]), &map, &cfg.geometry).unwrap();
        let grounded = ground_plan(&p, &map, &cfg.calibration, &cfg.geometry).unwrap();
        let (next, _) = execute(&grounded, &scene, &cfg.execution_faults, &cfg.calibration, &cfg.geometry.tolerance, &mut rng::stream(0, "t")).unwrap();
        let blind = PhaseConfig { perception: PerceptionNoiseConfig { p_miss: 1.0, ..Default::default() }, ..cfg.clone() };
        let verdict = verify_outcome(&grounded, &refreshed_map(&next, &blind), &cfg.geometry);
        assert!(!verdict.pass);
        assert_eq!(verdict.checks[0].reference, None);
    }

    #[test]
    fn wait_plan_leaves_scene_unchanged() {
        let (scene, _) = layout();
        let cfg = PhaseConfig::default();
        let wait = vec![GroundedAction { action: Action::Wait { reason: WaitReason::NoSolution }, target: GroundedTarget::Wait }];
        let (next, _) = execute(&wait, &scene, &cfg.execution_faults, &cfg.calibration, &cfg.geometry.tolerance, &mut rng::stream(0, "t")).unwrap();
        assert_eq!(next, scene);
    }

    #[test]
    fn recovery_parks_held_blocks() {
        let (scene, _) = layout();
        let held = apply_mutation(&scene, &Mutation::lift(14, Pose::new(300.0, 450.0, 0.0))).unwrap();
        let recovered = recover(&held);
        assert_eq!(recovered.held().count(), 0);
        assert!(recovered.validate().is_ok());
    }

    #[test]
    fn trace_log_round_trip() {
        let records = vec![TraceRecord { step: 0, action: "pick(4)".into(), target: Some([1.0, 2.0]), injected_fault: Some(ExecFault::PlaceMiss), result: "ok".into() }];
        let text = write_trace(&records);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(parse_trace(&text).unwrap(), records);
    }
}
