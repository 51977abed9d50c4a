//! Three-phase interaction monitor: hysteresis over the activity signal,
//! bounded snapshot buffers and payload assembly for each trigger mode.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workspace::{Pose, Scene, Symbol};

/// Fixed instruction sent in request-driven mode.
pub const REQUEST_INSTRUCTION: &str = "Complete the equation by placing the appropriate block.";
/// Frames in an always-on window.
pub const WINDOW_LEN: usize = 5;
/// Frame stride between always-on window samples.
pub const WINDOW_STRIDE: u64 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("frame {got} does not follow frame {last}")]
    OutOfOrderFrame { last: u64, got: u64 },
    #[error("snapshot buffer is empty")]
    EmptyBuffer,
    #[error("payload arguments do not match mode {0}")]
    ModeArgumentMismatch(TriggerMode),
    #[error("invalid monitor config: {0}")]
    InvalidConfig(String),
    #[error("activity trace line {line}: {message}")]
    Trace { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivitySample {
    pub frame_index: u64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub theta_on: f64,
    pub theta_off: f64,
    pub n_on: u32,
    pub n_off: u32,
    pub buffer_capacity: usize,
    pub frame_rate: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            theta_on: 5.0,
            theta_off: 2.0,
            n_on: 3,
            n_off: 15,
            buffer_capacity: 8,
            frame_rate: 30.0,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        let bad = |m: &str| Err(MonitorError::InvalidConfig(m.to_string()));
        if !(self.theta_off < self.theta_on) {
            return bad("theta_off must be below theta_on");
        }
        if self.theta_off < 0.0 {
            return bad("thresholds must be non-negative");
        }
        if self.n_on == 0 || self.n_off == 0 {
            return bad("persistence counts must be at least 1");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer capacity must be at least 1");
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame rate must be positive");
        }
        Ok(())
    }

    pub fn frame_interval(&self) -> f64 {
        1.0 / self.frame_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreEvent,
    HumanAction,
    PostEvent,
}

/// Counter state of the hysteresis machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorState {
    pub phase: Phase,
    pub consecutive_above: u32,
    pub consecutive_below: u32,
    pub last_frame: Option<u64>,
}

impl Default for MonitorState {
    fn default() -> Self {
        MonitorState {
            phase: Phase::PreEvent,
            consecutive_above: 0,
            consecutive_below: 0,
            last_frame: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    Onset { frame: u64 },
    Offset { frame: u64 },
}

/// Advances the hysteresis machine by one sample.
pub fn step_state(
    state: &MonitorState,
    sample: ActivitySample,
    config: &MonitorConfig,
) -> Result<(MonitorState, Vec<Transition>), MonitorError> {
    if let Some(last) = state.last_frame {
        if sample.frame_index <= last {
            return Err(MonitorError::OutOfOrderFrame { last, got: sample.frame_index });
        }
    }
    let mut next = *state;
    next.last_frame = Some(sample.frame_index);
    let mut transitions = Vec::new();
    match state.phase {
        Phase::PreEvent | Phase::PostEvent => {
            next.consecutive_below = 0;
            if sample.rho > config.theta_on {
                next.consecutive_above += 1;
            } else {
                next.consecutive_above = 0;
            }
            if next.consecutive_above >= config.n_on {
                next.phase = Phase::HumanAction;
                next.consecutive_above = 0;
                transitions.push(Transition::Onset { frame: sample.frame_index });
            }
        }
        Phase::HumanAction => {
            next.consecutive_above = 0;
            if sample.rho < config.theta_off {
                next.consecutive_below += 1;
            } else {
                next.consecutive_below = 0;
            }
            if next.consecutive_below >= config.n_off {
                next.phase = Phase::PostEvent;
                next.consecutive_below = 0;
                transitions.push(Transition::Offset { frame: sample.frame_index });
            }
        }
    }
    Ok((next, transitions))
}

/// A block as seen by the camera: no identity, just appearance and pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservedBlock {
    pub symbol: Symbol,
    pub pose: Pose,
    pub footprint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub frame_index: u64,
    pub timestamp: f64,
    /// On-table blocks, sorted by position.
    pub observation: Vec<ObservedBlock>,
    pub stable: bool,
}

impl Snapshot {
    pub fn capture(scene: &Scene, rho: f64, config: &MonitorConfig) -> Snapshot {
        let mut observation: Vec<ObservedBlock> = scene
            .on_table()
            .map(|b| ObservedBlock { symbol: b.symbol, pose: b.pose, footprint: b.footprint })
            .collect();
        observation.sort_by(|a, b| {
            a.pose.y.total_cmp(&b.pose.y).then(a.pose.x.total_cmp(&b.pose.x))
        });
        Snapshot {
            frame_index: scene.frame_index,
            timestamp: scene.timestamp,
            observation,
            stable: rho < config.theta_off,
        }
    }
}

/// Fixed-capacity FIFO that evicts its oldest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotBuffer {
    capacity: usize,
    items: VecDeque<Snapshot>,
}

impl SnapshotBuffer {
    pub fn new(capacity: usize) -> Self {
        SnapshotBuffer { capacity: capacity.max(1), items: VecDeque::with_capacity(capacity) }
    }

    /// Pushes a snapshot; unstable ones are ignored.
    pub fn push(&mut self, snapshot: Snapshot) {
        if !snapshot.stable {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(snapshot);
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Snapshot> {
        self.items.iter()
    }
}

/// Newest stable entry of the pre-event buffer.
pub fn select_pre_snapshot(buffer: &SnapshotBuffer) -> Result<Snapshot, MonitorError> {
    buffer.items.iter().rev().find(|s| s.stable).cloned().ok_or(MonitorError::EmptyBuffer)
}

/// First stable entry of the post-event buffer.
pub fn select_post_snapshot(buffer: &SnapshotBuffer) -> Result<Snapshot, MonitorError> {
    buffer.items.iter().find(|s| s.stable).cloned().ok_or(MonitorError::EmptyBuffer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MonitorEvent {
    Onset { frame: u64 },
    Offset { frame: u64 },
    EventCompleted {
        onset_frame: u64,
        offset_frame: u64,
        pre: Snapshot,
        post: Snapshot,
    },
}

/// Frame-by-frame monitor owning the state machine and both buffers.
#[derive(Debug, Clone)]
pub struct EventMonitor {
    config: MonitorConfig,
    state: MonitorState,
    pre_buffer: SnapshotBuffer,
    post_buffer: SnapshotBuffer,
    pending_pre: Option<(u64, Snapshot)>,
    suspended: bool,
}

impl EventMonitor {
    pub fn new(config: MonitorConfig) -> Result<Self, MonitorError> {
        config.validate()?;
        Ok(EventMonitor {
            config,
            state: MonitorState::default(),
            pre_buffer: SnapshotBuffer::new(config.buffer_capacity),
            post_buffer: SnapshotBuffer::new(config.buffer_capacity),
            pending_pre: None,
            suspended: false,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn state(&self) -> &MonitorState {
        &self.state
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn pre_buffer(&self) -> &SnapshotBuffer {
        &self.pre_buffer
    }

    pub fn post_buffer(&self) -> &SnapshotBuffer {
        &self.post_buffer
    }

    pub fn is_suspended(&self) -> bool {
        self.suspended
    }

    /// Stops processing frames while the robot responds.
    pub fn suspend(&mut self) {
        self.suspended = true;
    }

    /// Restarts monitoring from a fresh stable observation of `scene`.
    pub fn resume(&mut self, scene: &Scene) {
        self.suspended = false;
        self.state = MonitorState { last_frame: self.state.last_frame, ..MonitorState::default() };
        self.pre_buffer.clear();
        self.post_buffer.clear();
        self.pending_pre = None;
        self.pre_buffer.push(Snapshot::capture(scene, 0.0, &self.config));
    }

    /// Feeds one frame. Returns the monitor events it produced.
    pub fn ingest_frame(&mut self, scene: &Scene, rho: f64) -> Result<Vec<MonitorEvent>, MonitorError> {
        if self.suspended {
            return Ok(Vec::new());
        }
        let snapshot = Snapshot::capture(scene, rho, &self.config);
        let sample = ActivitySample { frame_index: scene.frame_index, rho };
        let (next, transitions) = step_state(&self.state, sample, &self.config)?;
        self.state = next;
        let mut events = Vec::new();
        for transition in &transitions {
            match *transition {
                Transition::Onset { frame } => {
                    self.post_buffer.clear();
                    match select_pre_snapshot(&self.pre_buffer) {
                        Ok(pre) => self.pending_pre = Some((frame, pre)),
                        Err(e) => {
                            self.state.phase = Phase::PreEvent;
                            return Err(e);
                        }
                    }
                    self.pre_buffer.clear();
                    events.push(MonitorEvent::Onset { frame });
                }
                Transition::Offset { frame } => {
                    events.push(MonitorEvent::Offset { frame });
                    self.post_buffer.push(snapshot.clone());
                    let post = select_post_snapshot(&self.post_buffer)?;
                    let (onset_frame, pre) =
                        self.pending_pre.take().ok_or(MonitorError::EmptyBuffer)?;
                    events.push(MonitorEvent::EventCompleted {
                        onset_frame,
                        offset_frame: frame,
                        pre,
                        post,
                    });
                }
            }
        }
        match self.state.phase {
            Phase::PreEvent => self.pre_buffer.push(snapshot),
            Phase::PostEvent => {
                if transitions.is_empty() {
                    self.post_buffer.push(snapshot.clone());
                }
                self.pre_buffer.push(snapshot);
            }
            Phase::HumanAction => {}
        }
        Ok(events)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    Proposed,
    PostOnly,
    AlwaysOn,
    RequestDriven,
}

impl TriggerMode {
    pub const ALL: [TriggerMode; 4] = [
        TriggerMode::Proposed,
        TriggerMode::AlwaysOn,
        TriggerMode::PostOnly,
        TriggerMode::RequestDriven,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TriggerMode::Proposed => "proposed",
            TriggerMode::PostOnly => "post-only",
            TriggerMode::AlwaysOn => "always-on",
            TriggerMode::RequestDriven => "request-driven",
        }
    }

    /// Row label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            TriggerMode::Proposed => "Proposed",
            TriggerMode::PostOnly => "Post-only",
            TriggerMode::AlwaysOn => "Always-on",
            TriggerMode::RequestDriven => "Request-driven",
        }
    }
}

impl fmt::Display for TriggerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TriggerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "proposed" => Ok(TriggerMode::Proposed),
            "post-only" => Ok(TriggerMode::PostOnly),
            "always-on" => Ok(TriggerMode::AlwaysOn),
            "request-driven" => Ok(TriggerMode::RequestDriven),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPayload {
    pub mode: TriggerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre: Option<Snapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<Snapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Vec<Snapshot>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

impl EventPayload {
    /// Checks the shape rules for the payload's mode.
    pub fn check_shape(&self) -> Result<(), MonitorError> {
        let ok = match self.mode {
            TriggerMode::Proposed => {
                self.pre.is_some()
                    && self.post.is_some()
                    && self.window.is_none()
                    && self.instruction.is_none()
            }
            TriggerMode::PostOnly => {
                self.pre.is_none()
                    && self.post.is_some()
                    && self.window.is_none()
                    && self.instruction.is_none()
            }
            TriggerMode::AlwaysOn => {
                self.pre.is_none()
                    && self.post.is_none()
                    && self.instruction.is_none()
                    && self.window.as_ref().is_some_and(|w| w.len() == WINDOW_LEN)
            }
            TriggerMode::RequestDriven => {
                self.pre.is_none()
                    && self.post.is_some()
                    && self.window.is_none()
                    && self.instruction.is_some()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(MonitorError::ModeArgumentMismatch(self.mode))
        }
    }

    /// The observation the object map is built from.
    pub fn latest(&self) -> Option<&Snapshot> {
        self.post.as_ref().or_else(|| self.window.as_ref().and_then(|w| w.last()))
    }
}

/// Assembles a payload for `mode`; request-driven payloads carry
/// `instruction` (defaulting to [`REQUEST_INSTRUCTION`]).
pub fn build_payload(
    mode: TriggerMode,
    pre: Option<Snapshot>,
    post: Option<Snapshot>,
    window: Option<Vec<Snapshot>>,
    instruction: Option<&str>,
) -> Result<EventPayload, MonitorError> {
    let instruction = match mode {
        TriggerMode::RequestDriven => Some(instruction.unwrap_or(REQUEST_INSTRUCTION).to_string()),
        _ if instruction.is_some() => return Err(MonitorError::ModeArgumentMismatch(mode)),
        _ => None,
    };
    let payload = EventPayload { mode, pre, post, window, instruction };
    payload.check_shape()?;
    Ok(payload)
}

/// Frame indices of an always-on window ending at `end_frame`, oldest first.
/// Returns `None` when the window would start before frame 0.
pub fn window_frames(end_frame: u64) -> Option<Vec<u64>> {
    let span = WINDOW_STRIDE * (WINDOW_LEN as u64 - 1);
    let start = end_frame.checked_sub(span)?;
    Some((0..WINDOW_LEN as u64).map(|k| start + k * WINDOW_STRIDE).collect())
}

/// Reads an activity replay file of `frame_index rho` lines (`#` comments).
pub fn parse_activity_trace(text: &str) -> Result<Vec<ActivitySample>, MonitorError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| MonitorError::Trace { line: idx + 1, message };
        let mut it = line.split_whitespace();
        let (Some(f), Some(r), None) = (it.next(), it.next(), it.next()) else {
            return Err(err("expected `frame_index rho`".into()));
        };
        let frame_index = f.parse::<u64>().map_err(|_| err(format!("bad frame {f:?}")))?;
        let rho = r.parse::<f64>().map_err(|_| err(format!("bad rho {r:?}")))?;
        if !(rho >= 0.0) {
            return Err(err("rho must be non-negative".into()));
        }
        out.push(ActivitySample { frame_index, rho });
    }
    Ok(out)
}

/// Runs the state machine over a whole trace.
pub fn replay_trace(
    samples: &[ActivitySample],
    config: &MonitorConfig,
) -> Result<Vec<Transition>, MonitorError> {
    let mut state = MonitorState::default();
    let mut out = Vec::new();
    for &sample in samples {
        let (next, transitions) = step_state(&state, sample, config)?;
        state = next;
        out.extend(transitions);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(rhos: &[f64]) -> Vec<ActivitySample> {
        rhos.iter()
            .enumerate()
            .map(|(i, &rho)| ActivitySample { frame_index: i as u64, rho })
            .collect()
    }

    fn snap(frame: u64) -> Snapshot {
        Snapshot { frame_index: frame, timestamp: frame as f64 / 30.0, observation: vec![], stable: true }
    }

    #[test]
    fn quiet_trace_has_no_transitions() {
        let cfg = MonitorConfig::default();
        assert!(replay_trace(&samples(&[0.0, 0.0, 0.0]), &cfg).unwrap().is_empty());
    }

    #[test]
    fn onset_on_third_persistent_sample() {
        let cfg = MonitorConfig::default();
        let t = replay_trace(&samples(&[6.0, 6.0, 6.0]), &cfg).unwrap();
        assert_eq!(t, vec![Transition::Onset { frame: 2 }]);
        assert!(replay_trace(&samples(&[6.0, 6.0]), &cfg).unwrap().is_empty());
    }

    #[test]
    fn alternating_rho_never_offsets() {
        let cfg = MonitorConfig::default();
        let mut state = MonitorState { phase: Phase::HumanAction, ..Default::default() };
        for i in 0..100u64 {
            let rho = if i % 2 == 0 { 0.0 } else { 3.0 };
            let (next, t) = step_state(&state, ActivitySample { frame_index: i, rho }, &cfg).unwrap();
            assert!(t.is_empty());
            assert!(next.consecutive_below <= 1);
            state = next;
        }
        assert_eq!(state.phase, Phase::HumanAction);
    }

    #[test]
    fn out_of_order_frames_are_rejected() {
        let cfg = MonitorConfig::default();
        let (s, _) = step_state(&MonitorState::default(), ActivitySample { frame_index: 5, rho: 0.0 }, &cfg).unwrap();
        assert_eq!(
            step_state(&s, ActivitySample { frame_index: 5, rho: 0.0 }, &cfg),
            Err(MonitorError::OutOfOrderFrame { last: 5, got: 5 })
        );
    }

    #[test]
    fn snapshot_selection() {
        let mut buf = SnapshotBuffer::new(8);
        for f in 10..=12 {
            buf.push(snap(f));
        }
        assert_eq!(select_pre_snapshot(&buf).unwrap().frame_index, 12);
        assert_eq!(select_post_snapshot(&buf).unwrap().frame_index, 10);

        let mut one = SnapshotBuffer::new(8);
        one.push(snap(10));
        assert_eq!(select_pre_snapshot(&one).unwrap().frame_index, 10);
        assert_eq!(select_post_snapshot(&one).unwrap().frame_index, 10);

        let mut small = SnapshotBuffer::new(3);
        for f in 1..=9 {
            small.push(snap(f));
        }
        assert_eq!(small.len(), 3);
        assert_eq!(select_pre_snapshot(&small).unwrap().frame_index, 9);

        let empty = SnapshotBuffer::new(3);
        assert_eq!(select_post_snapshot(&empty), Err(MonitorError::EmptyBuffer));
        assert_eq!(select_pre_snapshot(&empty), Err(MonitorError::EmptyBuffer));
    }

    #[test]
    fn unstable_snapshots_never_enter_buffers() {
        let mut buf = SnapshotBuffer::new(2);
        buf.push(Snapshot { stable: false, ..snap(1) });
        assert!(buf.is_empty());
    }

    #[test]
    fn payload_shapes() {
        let p = build_payload(TriggerMode::Proposed, Some(snap(12)), Some(snap(40)), None, None).unwrap();
        assert_eq!(p.pre.unwrap().frame_index, 12);
        assert_eq!(p.post.unwrap().frame_index, 40);

        let r = build_payload(TriggerMode::RequestDriven, None, Some(snap(40)), None, None).unwrap();
        assert_eq!(r.instruction.as_deref(), Some("Complete the equation by placing the appropriate block."));

        let frames = window_frames(40).unwrap();
        assert_eq!(frames, vec![20, 25, 30, 35, 40]);
        let w = build_payload(TriggerMode::AlwaysOn, None, None, Some(frames.iter().map(|&f| snap(f)).collect()), None)
            .unwrap();
        assert_eq!(w.window.unwrap().len(), 5);

        assert_eq!(
            build_payload(TriggerMode::PostOnly, Some(snap(1)), Some(snap(2)), None, None),
            Err(MonitorError::ModeArgumentMismatch(TriggerMode::PostOnly))
        );
        assert!(build_payload(TriggerMode::AlwaysOn, None, None, Some(vec![snap(1)]), None).is_err());
        assert!(build_payload(TriggerMode::Proposed, None, Some(snap(2)), None, None).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = MonitorConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.theta_off = 6.0;
        assert!(cfg.validate().is_err());
        let cfg = MonitorConfig { n_on: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trace_file_parsing() {
        let t = parse_activity_trace("# header\n0 0.0\n1 6.5\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].rho, 6.5);
        assert!(matches!(parse_activity_trace("0 -1\n"), Err(MonitorError::Trace { line: 1, .. })));
        assert!(parse_activity_trace("0\n").is_err());
    }
}
