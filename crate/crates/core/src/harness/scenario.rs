//! Scenario files: an initial scene, a scripted human interaction and the
//! expected assistance outcome.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::{build_payload, MonitorConfig, Snapshot, TriggerMode};
use crate::perception::{compute_activity, ActivityModel};
use crate::planner::{oracle_infer_goal, Decision, OverlayEntry, PlannerContract, PlannerRequest, TaskContext, WaitReason};
use crate::workspace::{parse_scene_fixture, Point, Pose, Rect, Scene, Symbol, Zone};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    ParseError { path: String, message: String },
    #[error("{id}: labelled {labelled} but the arithmetic oracle says {found}")]
    InconsistentCaseType { id: String, labelled: String, found: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseType {
    Solvable,
    Unsolvable,
}

impl CaseType {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseType::Solvable => "solvable",
            CaseType::Unsolvable => "unsolvable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    /// Result symbols, left to right.
    Result(Vec<Symbol>),
    Wait(WaitReason),
}

impl Expected {
    fn parse(text: &str) -> Result<Self, String> {
        let t = text.trim();
        if t == "wait(no_solution)" || t == "wait" {
            return Ok(Expected::Wait(WaitReason::NoSolution));
        }
        if t.is_empty() {
            return Err("empty expected result".into());
        }
        t.chars()
            .map(|c| Symbol::from_char(c).ok_or_else(|| format!("bad result symbol {c:?}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Expected::Result)
    }

    pub fn describe(&self) -> String {
        match self {
            Expected::Result(s) => s.iter().map(|s| s.as_char()).collect(),
            Expected::Wait(r) => format!("wait({})", r.as_str()),
        }
    }
}

/// One scripted human move: lift `block`, carry it for `duration` frames
/// starting at `start`, put it down at `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptMove {
    pub block: u32,
    pub to: [f64; 2],
    pub start: u64,
    pub duration: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    id: String,
    #[serde(default)]
    description: String,
    case_type: CaseType,
    expected: String,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    always_on_offset_frames: u64,
    #[serde(default)]
    diff_dependent: bool,
    scene: String,
    #[serde(default)]
    script: Vec<ScriptMove>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub id: String,
    pub description: String,
    pub case_type: CaseType,
    pub expected: Expected,
    pub seed: u64,
    /// Frames between the start of the human motion and the first
    /// always-on query.
    pub always_on_offset_frames: u64,
    /// The active expression can only be told apart using the pre/post diff.
    pub diff_dependent: bool,
    pub initial: Scene,
    pub script: Vec<ScriptMove>,
    /// Ground-truth scene once the script is done.
    pub final_scene: Scene,
    /// Ground-truth id of the `=` the result belongs after, when solvable.
    pub target_equals: Option<u32>,
}

/// Frames after the last scripted motion that every trial simulates.
pub const TAIL_FRAMES: u64 = 40;

impl Scenario {
    pub fn motion_start(&self) -> u64 {
        self.script.iter().map(|m| m.start).min().unwrap_or(0)
    }

    pub fn motion_end(&self) -> u64 {
        self.script.iter().map(|m| m.start + m.duration).max().unwrap_or(0)
    }

    pub fn tray_symbols(&self) -> Vec<Symbol> {
        self.final_scene.on_table().filter(|b| b.zone == Zone::CandidateTray).map(|b| b.symbol).collect()
    }

    /// Ground-truth scene at `frame` and whether a hand is in the workspace.
    pub fn scene_at(&self, frame: u64, config: &MonitorConfig) -> (Scene, bool) {
        let mut scene = self.initial.clone();
        let mut active = false;
        let mut moves = self.script.clone();
        moves.sort_by_key(|m| m.start);
        for m in &moves {
            let Some(block) = scene.blocks.get(&m.block).cloned() else { continue };
            let from = block.pose.position();
            let to = Point::new(m.to[0], m.to[1]);
            let end = m.start + m.duration;
            if frame < m.start {
                continue;
            }
            let entry = scene.blocks.get_mut(&m.block).expect("scripted block");
            if frame >= end {
                entry.pose = Pose::new(to.x, to.y, block.pose.theta);
                if frame == end {
                    active = true;
                }
            } else {
                let t = (frame - m.start) as f64 / m.duration.max(1) as f64;
                let p = from + (to - from) * t;
                entry.pose = Pose::new(p.x, p.y, block.pose.theta);
                entry.zone = Zone::Held;
                active = true;
            }
        }
        let placed: Vec<(u32, Point)> =
            scene.blocks.values().filter(|b| b.zone != Zone::Held).map(|b| (b.block_id, b.anchor())).collect();
        for (id, p) in placed {
            let zone = scene.zone_at(p);
            scene.blocks.get_mut(&id).expect("known id").zone = zone;
        }
        scene.frame_index = frame;
        scene.timestamp = frame as f64 * config.frame_interval();
        (scene, active)
    }

    /// Total frames a trial simulates.
    pub fn frame_count(&self, config: &MonitorConfig, always_on_span: u64) -> u64 {
        let monitor_tail = self.motion_end() + u64::from(config.n_off) + TAIL_FRAMES;
        let always_on_tail = self.motion_start() + self.always_on_offset_frames + always_on_span + 1;
        monitor_tail.max(always_on_tail)
    }

    /// Every frame of the trial with its simulated activity value.
    pub fn frames(&self, config: &MonitorConfig, activity: &ActivityModel, always_on_span: u64) -> Vec<(Scene, f64)> {
        let count = self.frame_count(config, always_on_span);
        let mut out: Vec<(Scene, f64)> = Vec::with_capacity(count as usize);
        for f in 0..count {
            let (scene, active) = self.scene_at(f, config);
            let rho = match out.last() {
                Some((prev, _)) => compute_activity(prev, &scene, active, config.frame_interval(), activity),
                None => {
                    if active {
                        activity.hand_constant
                    } else {
                        0.0
                    }
                }
            };
            out.push((scene, rho));
        }
        out
    }
}

fn ground_truth_overlay(scene: &Scene) -> Vec<OverlayEntry> {
    scene
        .on_table()
        .map(|b| OverlayEntry {
            id: b.block_id,
            symbol: b.symbol,
            anchor: b.anchor(),
            bbox: Rect::centered(b.anchor(), b.footprint, b.footprint),
        })
        .collect()
}

/// Oracle decision on the noise-free pre/post pair, keyed by true ids.
pub fn ground_truth_decision(initial: &Scene, final_scene: &Scene) -> Result<crate::planner::GoalInference, String> {
    let cfg = MonitorConfig::default();
    let pre = Snapshot::capture(initial, 0.0, &cfg);
    let post = Snapshot::capture(final_scene, 0.0, &cfg);
    let payload = build_payload(TriggerMode::Proposed, Some(pre), Some(post), None, None).map_err(|e| e.to_string())?;
    let request = PlannerRequest {
        payload,
        overlay: ground_truth_overlay(final_scene),
        task: TaskContext { expression_band: final_scene.expression_band, footprint: crate::workspace::typical_footprint(final_scene) },
        contract: PlannerContract::default(),
    };
    oracle_infer_goal(&request).map_err(|e| e.to_string())
}

pub fn parse_scenario(text: &str, path: &str) -> Result<Scenario, ScenarioError> {
    let perr = |message: String| ScenarioError::ParseError { path: path.to_string(), message };
    let file: ScenarioFile = toml::from_str(text).map_err(|e| perr(e.to_string()))?;
    let initial = parse_scene_fixture(&file.scene).map_err(|e| perr(e.to_string()))?;
    let expected = Expected::parse(&file.expected).map_err(perr)?;
    if file.script.is_empty() {
        return Err(perr("script is empty: no interaction event to detect".into()));
    }
    for m in &file.script {
        if !initial.blocks.contains_key(&m.block) {
            return Err(perr(format!("script moves unknown block {}", m.block)));
        }
        if m.duration == 0 {
            return Err(perr(format!("move of block {} has zero duration", m.block)));
        }
        if m.start == 0 {
            return Err(perr("moves must start after frame 0 so a pre-event frame exists".into()));
        }
    }
    let mut scenario = Scenario {
        id: file.id,
        description: file.description,
        case_type: file.case_type,
        expected,
        seed: file.seed,
        always_on_offset_frames: file.always_on_offset_frames,
        diff_dependent: file.diff_dependent,
        final_scene: initial.clone(),
        initial,
        script: file.script,
        target_equals: None,
    };
    let cfg = MonitorConfig::default();
    let (mut final_scene, _) = scenario.scene_at(scenario.motion_end() + 1, &cfg);
    final_scene.frame_index = 0;
    final_scene.timestamp = 0.0;
    final_scene.validate().map_err(|e| perr(format!("scripted final scene is invalid: {e}")))?;
    scenario.final_scene = final_scene;

    let inference = ground_truth_decision(&scenario.initial, &scenario.final_scene).map_err(perr)?;
    let found = match inference.decision {
        Decision::Act => Expected::Result(inference.required_symbols.clone()),
        Decision::Wait(reason) => Expected::Wait(reason),
    };
    let consistent = match (scenario.case_type, &found) {
        (CaseType::Solvable, Expected::Result(_)) | (CaseType::Unsolvable, Expected::Wait(WaitReason::NoSolution)) => {
            found == scenario.expected
        }
        _ => false,
    };
    if !consistent {
        return Err(ScenarioError::InconsistentCaseType {
            id: scenario.id,
            labelled: format!("{} ({})", scenario.case_type.as_str(), scenario.expected.describe()),
            found: format!("{} ({})", found.describe(), inference.note),
        });
    }
    scenario.target_equals = inference.equals_id;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: name.clone(), source })?;
    parse_scenario(&text, &name)
}

/// Loads every `*.toml` scenario in `dir`, sorted by id.
pub fn load_suite(dir: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    let name = dir.display().to_string();
    let entries = std::fs::read_dir(dir).map_err(|source| ScenarioError::Io { path: name.clone(), source })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| ScenarioError::Io { path: name.clone(), source })?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "toml") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut suite = paths.iter().map(|p| load_scenario(p)).collect::<Result<Vec<_>, _>>()?;
    suite.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TWO_PLUS_THREE: &str = r#"
id = "two_plus_three"
case_type = "solvable"
expected = "5"
seed = 3
always_on_offset_frames = 60
scene = """
1 2 400 300 0 expression_row
2 + 445 300 0 expression_row
3 3 300 500 0 candidate_tray
4 = 350 500 0 candidate_tray
5 5 500 500 0 candidate_tray
6 7 550 500 0 candidate_tray
7 + 600 500 0 candidate_tray
"""
[[script]]
block = 3
to = [490, 300]
start = 20
duration = 20
[[script]]
block = 4
to = [550, 300]
start = 40
duration = 20
"#;

    #[test]
    fn two_plus_three_loads_as_solvable() {
        let s = parse_scenario(TWO_PLUS_THREE, "two_plus_three").unwrap();
        assert_eq!(s.expected, Expected::Result(vec![Symbol::Digit(5)]));
        assert_eq!(s.target_equals, Some(4));
        assert_eq!(s.motion_end(), 60);
    }

    #[test]
    fn mislabelled_case_type_is_rejected() {
        let text = TWO_PLUS_THREE.replace("case_type = \"solvable\"", "case_type = \"unsolvable\"").replace("expected = \"5\"", "expected = \"wait\"");
        assert!(matches!(parse_scenario(&text, "x"), Err(ScenarioError::InconsistentCaseType { .. })));
    }

    #[test]
    fn empty_script_is_a_parse_error() {
        let cut = TWO_PLUS_THREE.split("[[script]]").next().unwrap();
        assert!(matches!(parse_scenario(cut, "x"), Err(ScenarioError::ParseError { .. })));
    }

    #[test]
    fn frames_hold_blocks_while_moving() {
        let s = parse_scenario(TWO_PLUS_THREE, "two_plus_three").unwrap();
        let cfg = MonitorConfig::default();
        let (mid, active) = s.scene_at(30, &cfg);
        assert!(active);
        assert_eq!(mid.blocks[&3].zone, Zone::Held);
        let (after, active) = s.scene_at(70, &cfg);
        assert!(!active);
        assert_eq!(after.blocks[&4].zone, Zone::ExpressionRow);
    }
}
