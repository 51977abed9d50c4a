//! Python module `evassist`. Structured values cross the boundary as JSON
//! strings; the scene and session types are native classes.

use std::path::Path;

use evassist_core::config::Config;
use evassist_core::executor::validate_plan as core_validate_plan;
use evassist_core::harness::{self, load_scenario as core_load_scenario, load_suite};
use evassist_core::monitor::{parse_activity_trace, replay_trace as core_replay, Snapshot, TriggerMode};
use evassist_core::perception::{perceive, ObjectMap};
use evassist_core::planner::{parse_reply as core_parse_reply, write_reply, PlannerSpec};
use evassist_core::session::{encode, parse_inbound, Session as CoreSession};
use evassist_core::workspace::{
    evaluate as core_evaluate, parse_expression, parse_scene_fixture, relation_between as core_relation, write_scene_fixture,
    Point, QualitativeRelation, RelationTolerance, Scene as CoreScene, Symbol, BLOCK_SIDE,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serialisable")
}

fn config_from(toml: Option<&str>) -> PyResult<Config> {
    match toml {
        Some(t) => Config::from_toml(t).map_err(value_err),
        None => Ok(Config::default()),
    }
}

fn mode_from(name: &str) -> PyResult<TriggerMode> {
    TriggerMode::ALL
        .into_iter()
        .find(|m| m.as_str() == name)
        .ok_or_else(|| value_err(format!("unknown mode {name:?}")))
}

fn planner_from(name: &str, config: &Config) -> PyResult<PlannerSpec> {
    match name {
        "oracle" => Ok(PlannerSpec::Oracle),
        "noisy" => Ok(PlannerSpec::Noisy { faults: config.planner_faults.clone() }),
        "remote" => Ok(PlannerSpec::Remote { remote: config.remote.clone().with_env() }),
        other => Err(value_err(format!("unknown planner {other:?}"))),
    }
}

/// Ground-truth tabletop scene.
#[pyclass(name = "Scene", module = "evassist", skip_from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: CoreScene,
}

#[pymethods]
impl PyScene {
    /// Parses `id symbol x y theta zone` lines.
    #[staticmethod]
    fn from_fixture(text: &str) -> PyResult<Self> {
        parse_scene_fixture(text).map(|inner| PyScene { inner }).map_err(value_err)
    }

    fn to_fixture(&self) -> String {
        write_scene_fixture(&self.inner)
    }

    fn to_json(&self) -> String {
        to_json(&self.inner)
    }

    fn block_ids(&self) -> Vec<u32> {
        self.inner.blocks.keys().copied().collect()
    }

    /// `(symbol, x, y, zone)` of one block.
    fn block(&self, id: u32) -> PyResult<(String, f64, f64, String)> {
        let b = self.inner.block(id).map_err(value_err)?;
        Ok((b.symbol.as_char().to_string(), b.pose.x, b.pose.y, b.zone.as_str().to_string()))
    }

    /// Parse of the expression row as JSON.
    fn expression(&self) -> PyResult<String> {
        parse_expression(&self.inner).map(|p| to_json(&p)).map_err(value_err)
    }

    /// Object map of a noise-free observation as JSON.
    #[pyo3(signature = (config_toml=None))]
    fn perceive(&self, config_toml: Option<&str>) -> PyResult<String> {
        let config = config_from(config_toml)?;
        let snapshot = Snapshot::capture(&self.inner, 0.0, &config.monitor);
        Ok(to_json(&perceive(&snapshot, &config.perception)))
    }

    fn __len__(&self) -> usize {
        self.inner.blocks.len()
    }

    fn __repr__(&self) -> String {
        format!("Scene({} blocks)", self.inner.blocks.len())
    }
}

/// Interactive session; messages in and out are protocol JSON records.
#[pyclass(name = "Session", module = "evassist", unsendable)]
struct PySession {
    inner: CoreSession,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (id, scene, config_toml=None))]
    fn new(id: &str, scene: &PyScene, config_toml: Option<&str>) -> PyResult<Self> {
        Ok(PySession { inner: CoreSession::new(id, scene.inner.clone(), config_from(config_toml)?) })
    }

    /// Handles one inbound record. A robot turn started by the message is
    /// run to completion before returning; all outbound records are returned.
    fn handle(&mut self, message: &str) -> PyResult<Vec<String>> {
        let message = parse_inbound(message).map_err(value_err)?;
        let mut handled = self.inner.handle_message(message);
        let mut out: Vec<String> = handled.messages.iter().map(encode).collect();
        while let Some(job) = handled.job.take() {
            handled = self.inner.handle_message(job.run());
            out.extend(handled.messages.iter().map(encode));
        }
        Ok(out)
    }

    fn state(&self) -> String {
        to_json(&self.inner.view())
    }

    fn turn(&self) -> String {
        to_json(&self.inner.turn()).trim_matches('"').to_string()
    }
}

/// Evaluates `lhs op rhs` over the integers; raises on division by zero,
/// non-integer quotients and overflow.
#[pyfunction]
fn evaluate(lhs: i64, op: &str, rhs: i64) -> PyResult<i64> {
    let mut chars = op.chars();
    let (Some(c), None) = (chars.next(), chars.next()) else {
        return Err(value_err(format!("bad operator {op:?}")));
    };
    match Symbol::from_char(c) {
        Some(Symbol::Op(o)) => core_evaluate(lhs, o, rhs).map_err(value_err),
        _ => Err(value_err(format!("bad operator {op:?}"))),
    }
}

/// Whether `subject` stands in `relation` to `reference` with default
/// block tolerances.
#[pyfunction]
fn relation_holds(subject: (f64, f64), reference: (f64, f64), relation: &str) -> PyResult<bool> {
    let rel: QualitativeRelation = relation.parse().map_err(value_err)?;
    Ok(core_relation(
        Point::new(subject.0, subject.1),
        Point::new(reference.0, reference.1),
        rel,
        RelationTolerance::for_footprint(BLOCK_SIDE),
    ))
}

/// Replays a `frame_index rho` trace; returns transitions as JSON.
#[pyfunction]
#[pyo3(signature = (trace, config_toml=None))]
fn replay_trace(trace: &str, config_toml: Option<&str>) -> PyResult<String> {
    let config = config_from(config_toml)?;
    let samples = parse_activity_trace(trace).map_err(value_err)?;
    core_replay(&samples, &config.monitor).map(|t| to_json(&t)).map_err(value_err)
}

/// Loads and checks a scenario file; returns `(id, case_type, expected)`.
#[pyfunction]
fn load_scenario(path: &str) -> PyResult<(String, String, String)> {
    let s = core_load_scenario(Path::new(path)).map_err(value_err)?;
    Ok((s.id.clone(), s.case_type.as_str().to_string(), s.expected.describe()))
}

/// Runs one scenario; returns the trial record as JSON.
#[pyfunction]
#[pyo3(signature = (path, mode="proposed", planner="oracle", seed=0, config_toml=None))]
fn run_trial(path: &str, mode: &str, planner: &str, seed: u64, config_toml: Option<&str>) -> PyResult<String> {
    let config = config_from(config_toml)?;
    let scenario = core_load_scenario(Path::new(path)).map_err(value_err)?;
    let spec = planner_from(planner, &config)?;
    Ok(to_json(&harness::run_trial(&scenario, mode_from(mode)?, &spec, &config, seed)))
}

/// Runs a suite directory; returns `(records_jsonl, metrics_json)`.
#[pyfunction]
#[pyo3(signature = (suite, mode="proposed", planner="oracle", seed=0, config_toml=None))]
fn run_suite(suite: &str, mode: &str, planner: &str, seed: u64, config_toml: Option<&str>) -> PyResult<(String, String)> {
    let config = config_from(config_toml)?;
    let scenarios = load_suite(Path::new(suite)).map_err(value_err)?;
    let spec = planner_from(planner, &config)?;
    let modes = if mode == "all" { TriggerMode::ALL.to_vec() } else { vec![mode_from(mode)?] };
    let mut records = Vec::new();
    for m in modes {
        records.extend(harness::run_suite(&scenarios, m, &spec, &config, seed));
    }
    let metrics = harness::compute_metrics(&records).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let jsonl: String = records.iter().map(|r| to_json(r) + "\n").collect();
    Ok((jsonl, to_json(&metrics)))
}

/// Validates a planner reply; returns the normalised reply line.
#[pyfunction]
#[pyo3(signature = (text, config_toml=None))]
fn parse_reply(text: &str, config_toml: Option<&str>) -> PyResult<String> {
    let config = config_from(config_toml)?;
    core_parse_reply(text, &config.contract).map(|r| write_reply(&r)).map_err(value_err)
}

/// Checks a reply against an object map (JSON); returns the action count.
#[pyfunction]
#[pyo3(signature = (map_json, reply, config_toml=None))]
fn validate_plan(map_json: &str, reply: &str, config_toml: Option<&str>) -> PyResult<usize> {
    let config = config_from(config_toml)?;
    let map: ObjectMap = serde_json::from_str(map_json).map_err(value_err)?;
    let response = core_parse_reply(reply, &config.contract).map_err(value_err)?;
    core_validate_plan(&response, &map, &config.phase().geometry).map(|p| p.actions.len()).map_err(value_err)
}

#[pyfunction]
fn default_config() -> String {
    Config::default().to_toml()
}

#[pymodule]
fn evassist(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(relation_holds, m)?)?;
    m.add_function(wrap_pyfunction!(replay_trace, m)?)?;
    m.add_function(wrap_pyfunction!(load_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(parse_reply, m)?)?;
    m.add_function(wrap_pyfunction!(validate_plan, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
