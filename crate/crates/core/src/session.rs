//! Interactive sessions: human move commands drive synthetic frames into
//! the monitor; completed events hand a [`RobotJob`] to the host, whose
//! result comes back as an ordinary message.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::executor::{run_response_phase, PhaseConfig, PhaseOutcome, PhaseResult, TraceRecord, Verdict};
use crate::monitor::{build_payload, EventMonitor, EventPayload, MonitorEvent, Phase, Snapshot, TriggerMode, WINDOW_LEN, WINDOW_STRIDE};
use crate::perception::{compute_activity, perceive, ObjectMap};
use crate::planner::{overlay_from_map, Action, PlannerFaultKind, PlannerRequest, PlannerResponse, PlannerSpec, TaskContext};
use crate::rng;
use crate::workspace::{apply_mutation, typical_footprint, Mutation, Placement, Pose, Scene, Symbol, Zone};

/// Wire protocol identifier carried by every message.
pub const PROTOCOL_VERSION: &str = "evassist.session/1";

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionErrorCode {
    #[error("command rejected during the robot turn")]
    CommandInRobotTurn,
    #[error("unknown session")]
    UnknownSession,
    #[error("invalid mutation")]
    InvalidMutation,
    #[error("malformed message")]
    MalformedMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    HumanTurn,
    RobotTurn,
}

/// Messages a session accepts. `tick` and `phase_finished` come from the
/// host, the rest from clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Join,
    MoveBlock {
        id: u32,
        x: f64,
        y: f64,
        #[serde(default)]
        theta: f64,
    },
    Release,
    Reset,
    Configure {
        #[serde(default)]
        mode: Option<TriggerMode>,
        #[serde(default)]
        planner: Option<PlannerSpec>,
        #[serde(default)]
        seed: Option<u64>,
    },
    Tick,
    PhaseFinished { job_id: u64, result: Box<PhaseResult> },
}

/// Inbound wire record: protocol version plus the message body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InboundEnvelope {
    pub v: String,
    #[serde(flatten)]
    pub message: ClientMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockView {
    pub id: u32,
    pub symbol: Symbol,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub zone: Zone,
}

/// Full state broadcast to clients and served by the polling endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session: String,
    pub frame: u64,
    pub blocks: Vec<BlockView>,
    pub workspace: [f64; 4],
    pub expression_band: (f64, f64),
    pub monitor_phase: Phase,
    pub turn: Turn,
    pub mode: TriggerMode,
    pub planner: String,
    pub seed: u64,
    pub hand_active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_payload: Option<EventPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_plan: Option<PlannerResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerBody {
    State { state: Box<SessionView> },
    EventDetected { onset_frame: u64, offset_frame: u64 },
    PayloadBuilt { mode: TriggerMode, frames: Vec<u64>, object_ids: Vec<u32> },
    PlanReceived {
        actions: Vec<Action>,
        rationale: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        injected_fault: Option<PlannerFaultKind>,
    },
    ActionExecuted { record: TraceRecord },
    Verdict { verdict: Verdict },
    PhaseDone { outcome: PhaseOutcome, planner_calls: u32, retries: u32, recovery_executed: bool },
    Error { code: SessionErrorCode, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub v: String,
    pub session: String,
    /// Per-session sequence number; strictly increasing.
    pub version: u64,
    #[serde(flatten)]
    pub body: ServerBody,
}

/// A response phase to run off the message loop.
#[derive(Debug, Clone)]
pub struct RobotJob {
    pub job_id: u64,
    pub request: PlannerRequest,
    pub map: ObjectMap,
    pub scene: Scene,
    pub planner: PlannerSpec,
    pub phase: PhaseConfig,
    pub seed: u64,
}

impl RobotJob {
    /// Blocking: may call a remote planner.
    pub fn run(self) -> ClientMessage {
        let mut planner = self.planner.build(self.seed);
        let result = run_response_phase(&self.request, planner.as_mut(), &self.map, &self.scene, &self.phase, self.seed);
        ClientMessage::PhaseFinished { job_id: self.job_id, result: Box::new(result) }
    }
}

#[derive(Debug, Default)]
pub struct Handled {
    pub messages: Vec<ServerMessage>,
    pub job: Option<RobotJob>,
}

pub struct Session {
    id: String,
    config: Config,
    initial: Scene,
    scene: Scene,
    prev_scene: Scene,
    frame: u64,
    monitor: EventMonitor,
    turn: Turn,
    mode: TriggerMode,
    planner: PlannerSpec,
    seed: u64,
    hand_active: bool,
    /// Pose of each dragged block before the drag began.
    drag_origin: BTreeMap<u32, Pose>,
    history: VecDeque<Snapshot>,
    frames_since_query: u64,
    version: u64,
    job_counter: u64,
    pending_job: Option<u64>,
    last_payload: Option<EventPayload>,
    last_plan: Option<PlannerResponse>,
    last_verdict: Option<Verdict>,
}

impl Session {
    pub fn new(id: impl Into<String>, scene: Scene, config: Config) -> Self {
        let monitor = EventMonitor::new(config.monitor).expect("validated config");
        let mut session = Session {
            id: id.into(),
            initial: scene.clone(),
            prev_scene: scene.clone(),
            scene,
            frame: 0,
            monitor,
            turn: Turn::HumanTurn,
            mode: TriggerMode::Proposed,
            planner: PlannerSpec::Oracle,
            seed: 0,
            hand_active: false,
            drag_origin: BTreeMap::new(),
            history: VecDeque::new(),
            frames_since_query: 0,
            version: 0,
            job_counter: 0,
            pending_job: None,
            last_payload: None,
            last_plan: None,
            last_verdict: None,
            config,
        };
        session.restart_monitor();
        session
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn turn(&self) -> Turn {
        self.turn
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn view(&self) -> SessionView {
        let b = self.scene.workspace_bounds;
        SessionView {
            session: self.id.clone(),
            frame: self.frame,
            blocks: self
                .scene
                .blocks
                .values()
                .map(|blk| BlockView { id: blk.block_id, symbol: blk.symbol, x: blk.pose.x, y: blk.pose.y, theta: blk.pose.theta, zone: blk.zone })
                .collect(),
            workspace: [b.min_x, b.min_y, b.max_x, b.max_y],
            expression_band: self.scene.expression_band,
            monitor_phase: self.monitor.phase(),
            turn: self.turn,
            mode: self.mode,
            planner: self.planner.label().to_string(),
            seed: self.seed,
            hand_active: self.hand_active,
            last_payload: self.last_payload.clone(),
            last_plan: self.last_plan.clone(),
            last_verdict: self.last_verdict.clone(),
        }
    }

    fn emit(&mut self, out: &mut Handled, body: ServerBody) {
        self.version += 1;
        out.messages.push(ServerMessage { v: PROTOCOL_VERSION.to_string(), session: self.id.clone(), version: self.version, body });
    }

    fn emit_state(&mut self, out: &mut Handled) {
        let state = Box::new(self.view());
        self.emit(out, ServerBody::State { state });
    }

    fn error(&mut self, out: &mut Handled, code: SessionErrorCode, message: impl Into<String>) {
        self.emit(out, ServerBody::Error { code, message: message.into() });
    }

    fn restart_monitor(&mut self) {
        self.monitor = EventMonitor::new(self.config.monitor).expect("validated config");
        self.history.clear();
        self.frames_since_query = 0;
        self.scene.frame_index = self.frame;
        self.prev_scene = self.scene.clone();
    }

    /// Applies one message atomically.
    pub fn handle_message(&mut self, message: ClientMessage) -> Handled {
        let mut out = Handled::default();
        let human_command = matches!(
            message,
            ClientMessage::MoveBlock { .. } | ClientMessage::Release | ClientMessage::Reset | ClientMessage::Configure { .. }
        );
        if human_command && self.turn == Turn::RobotTurn {
            self.error(&mut out, SessionErrorCode::CommandInRobotTurn, "wait for the robot to finish");
            return out;
        }
        match message {
            ClientMessage::Join => self.emit_state(&mut out),
            ClientMessage::MoveBlock { id, x, y, theta } => self.move_block(&mut out, id, Pose::new(x, y, theta)),
            ClientMessage::Release => self.release(&mut out),
            ClientMessage::Reset => {
                self.scene = self.initial.clone();
                self.hand_active = false;
                self.drag_origin.clear();
                self.last_payload = None;
                self.last_plan = None;
                self.last_verdict = None;
                self.restart_monitor();
                self.emit_state(&mut out);
            }
            ClientMessage::Configure { mode, planner, seed } => {
                if let Some(m) = mode {
                    self.mode = m;
                }
                if let Some(p) = planner {
                    self.planner = p;
                }
                if let Some(s) = seed {
                    self.seed = s;
                }
                self.restart_monitor();
                self.emit_state(&mut out);
            }
            ClientMessage::Tick => self.tick(&mut out),
            ClientMessage::PhaseFinished { job_id, result } => self.finish_phase(&mut out, job_id, *result),
        }
        out
    }

    fn move_block(&mut self, out: &mut Handled, id: u32, pose: Pose) {
        let Some(block) = self.scene.blocks.get(&id) else {
            self.error(out, SessionErrorCode::InvalidMutation, format!("no block {id}"));
            return;
        };
        if !self.scene.workspace_bounds.contains_point(pose.position()) {
            self.error(out, SessionErrorCode::InvalidMutation, "target lies outside the workspace");
            return;
        }
        self.drag_origin.entry(id).or_insert(block.pose);
        let frame = self.scene.frame_index;
        self.scene = apply_mutation(&self.scene, &Mutation::lift(id, pose)).expect("lift of a known block");
        self.scene.frame_index = frame;
        self.hand_active = true;
        self.emit_state(out);
    }

    fn release(&mut self, out: &mut Handled) {
        let frame = self.scene.frame_index;
        let held: Vec<(u32, Pose)> = self.scene.held().map(|b| (b.block_id, b.pose)).collect();
        for (id, pose) in held {
            match apply_mutation(&self.scene, &Mutation { block_id: id, to: Placement::Table { pose } }) {
                Ok(next) => self.scene = next,
                Err(e) => {
                    let origin = self.drag_origin.get(&id).copied().unwrap_or(pose);
                    self.scene = apply_mutation(&self.scene, &Mutation { block_id: id, to: Placement::Table { pose: origin } })
                        .unwrap_or_else(|_| self.scene.clone());
                    self.error(out, SessionErrorCode::InvalidMutation, format!("block {id} reverted: {e}"));
                }
            }
        }
        self.scene.frame_index = frame;
        self.drag_origin.clear();
        self.hand_active = false;
        self.emit_state(out);
    }

    fn phase_config(&self) -> PhaseConfig {
        let mut phase = self.config.phase();
        let job_seed = rng::derive(self.seed, &format!("job-{}", self.job_counter));
        phase.perception.seed = rng::derive(self.config.perception.seed ^ job_seed, "perception");
        phase.execution_faults.seed = rng::derive(self.config.execution_faults.seed ^ job_seed, "execution");
        phase
    }

    fn start_job(&mut self, out: &mut Handled, payload: EventPayload, latest: &Snapshot) {
        let phase = self.phase_config();
        let map = perceive(latest, &phase.perception);
        let frames = match (&payload.pre, &payload.post, &payload.window) {
            (_, _, Some(w)) => w.iter().map(|s| s.frame_index).collect(),
            (pre, Some(post), None) => pre.iter().map(|s| s.frame_index).chain([post.frame_index]).collect(),
            _ => Vec::new(),
        };
        self.emit(out, ServerBody::PayloadBuilt { mode: payload.mode, frames, object_ids: map.entries.keys().copied().collect() });
        let request = PlannerRequest {
            payload: payload.clone(),
            overlay: overlay_from_map(&map),
            task: TaskContext { expression_band: self.scene.expression_band, footprint: typical_footprint(&self.scene) },
            contract: self.config.contract.clone(),
        };
        self.job_counter += 1;
        self.pending_job = Some(self.job_counter);
        self.last_payload = Some(payload);
        self.turn = Turn::RobotTurn;
        self.monitor.suspend();
        out.job = Some(RobotJob {
            job_id: self.job_counter,
            request,
            map,
            scene: self.scene.clone(),
            planner: self.planner.clone(),
            phase,
            seed: rng::derive(self.seed, &format!("planner-{}", self.job_counter)),
        });
    }

    fn tick(&mut self, out: &mut Handled) {
        self.frame += 1;
        self.scene.frame_index = self.frame;
        self.scene.timestamp = self.frame as f64 * self.config.monitor.frame_interval();
        if self.turn == Turn::RobotTurn {
            self.prev_scene = self.scene.clone();
            return;
        }
        let rho = compute_activity(&self.prev_scene, &self.scene, self.hand_active, self.config.monitor.frame_interval(), &self.config.activity);
        self.prev_scene = self.scene.clone();
        let snapshot = Snapshot::capture(&self.scene, rho, &self.config.monitor);
        self.history.push_back(snapshot.clone());
        let keep = (WINDOW_STRIDE as usize) * (WINDOW_LEN - 1) + 1;
        while self.history.len() > keep {
            self.history.pop_front();
        }
        let before = self.monitor.phase();
        let events = match self.monitor.ingest_frame(&self.scene, rho) {
            Ok(e) => e,
            Err(e) => {
                self.error(out, SessionErrorCode::InvalidMutation, e.to_string());
                return;
            }
        };
        if self.monitor.phase() != before && events.iter().all(|e| !matches!(e, MonitorEvent::EventCompleted { .. })) {
            self.emit_state(out);
        }
        if self.mode == TriggerMode::AlwaysOn {
            self.always_on_tick(out);
            return;
        }
        for event in events {
            if let MonitorEvent::EventCompleted { onset_frame, offset_frame, pre, post } = event {
                self.emit(out, ServerBody::EventDetected { onset_frame, offset_frame });
                let payload = match self.mode {
                    TriggerMode::Proposed => build_payload(self.mode, Some(pre), Some(post.clone()), None, None),
                    _ => build_payload(self.mode, None, Some(post.clone()), None, None),
                }
                .expect("payload shape follows the mode");
                self.start_job(out, payload, &post);
                self.emit_state(out);
                return;
            }
        }
    }

    fn always_on_tick(&mut self, out: &mut Handled) {
        self.frames_since_query += 1;
        let full = (WINDOW_STRIDE as usize) * (WINDOW_LEN - 1) + 1;
        if self.frames_since_query < self.config.always_on.period_frames || self.history.len() < full {
            return;
        }
        self.frames_since_query = 0;
        let window: Vec<Snapshot> = self.history.iter().step_by(WINDOW_STRIDE as usize).cloned().collect();
        if window.len() != WINDOW_LEN {
            return;
        }
        let latest = window.last().cloned().expect("non-empty window");
        let payload = build_payload(TriggerMode::AlwaysOn, None, None, Some(window), None).expect("window payload");
        self.start_job(out, payload, &latest);
        self.emit_state(out);
    }

    fn finish_phase(&mut self, out: &mut Handled, job_id: u64, result: PhaseResult) {
        if self.pending_job != Some(job_id) {
            return;
        }
        self.pending_job = None;
        if let Some(response) = &result.response {
            self.emit(
                out,
                ServerBody::PlanReceived {
                    actions: response.actions.clone(),
                    rationale: response.rationale.clone(),
                    injected_fault: result.injected_planner_fault,
                },
            );
        }
        for record in &result.trace {
            self.emit(out, ServerBody::ActionExecuted { record: record.clone() });
        }
        for verdict in &result.verdicts {
            self.emit(out, ServerBody::Verdict { verdict: verdict.clone() });
        }
        self.emit(
            out,
            ServerBody::PhaseDone {
                outcome: result.outcome.clone(),
                planner_calls: result.planner_calls,
                retries: result.retries,
                recovery_executed: result.recovery_executed,
            },
        );
        self.last_plan = result.response.clone();
        self.last_verdict = result.verdicts.last().cloned();
        self.scene = result.scene;
        self.scene.frame_index = self.frame;
        self.turn = Turn::HumanTurn;
        self.hand_active = false;
        self.restart_monitor();
        self.monitor.resume(&self.scene);
        self.emit_state(out);
    }
}

/// All live sessions of one host.
#[derive(Default)]
pub struct SessionHub {
    sessions: BTreeMap<String, Session>,
}

impl SessionHub {
    pub fn new() -> Self {
        SessionHub::default()
    }

    pub fn create(&mut self, id: &str, scene: Scene, config: Config) {
        self.sessions.entry(id.to_string()).or_insert_with(|| Session::new(id, scene, config));
    }

    pub fn get(&self, id: &str) -> Option<&Session> {
        self.sessions.get(id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.keys().cloned().collect()
    }

    pub fn dispatch(&mut self, id: &str, message: ClientMessage) -> Handled {
        match self.sessions.get_mut(id) {
            Some(s) => s.handle_message(message),
            None => Handled {
                messages: vec![ServerMessage {
                    v: PROTOCOL_VERSION.to_string(),
                    session: id.to_string(),
                    version: 0,
                    body: ServerBody::Error { code: SessionErrorCode::UnknownSession, message: format!("no session {id:?}") },
                }],
                job: None,
            },
        }
    }
}

/// Parses an inbound wire record.
pub fn parse_inbound(text: &str) -> Result<ClientMessage, String> {
    let envelope: InboundEnvelope = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if envelope.v != PROTOCOL_VERSION {
        return Err(format!("unsupported protocol version {:?}", envelope.v));
    }
    Ok(envelope.message)
}

/// Serialises an outbound message as one JSON record.
pub fn encode(message: &ServerMessage) -> String {
    serde_json::to_string(message).expect("server message serialises")
}
