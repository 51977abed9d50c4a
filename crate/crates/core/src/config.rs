//! One TOML file for every threshold, tolerance and fault probability.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{CalibrationTransform, ExecutionFaultConfig, ExecutionGeometry, PhaseConfig};
use crate::monitor::MonitorConfig;
use crate::perception::{ActivityModel, PerceptionNoiseConfig};
use crate::planner::{PlannerContract, PlannerFaultConfig, RemoteConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Always-on query schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlwaysOnConfig {
    /// Frames between consecutive queries.
    pub period_frames: u64,
    pub max_queries: u32,
}

impl Default for AlwaysOnConfig {
    fn default() -> Self {
        AlwaysOnConfig { period_frames: 25, max_queries: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub monitor: MonitorConfig,
    pub activity: ActivityModel,
    pub perception: PerceptionNoiseConfig,
    pub planner_faults: PlannerFaultConfig,
    pub remote: RemoteConfig,
    pub execution_faults: ExecutionFaultConfig,
    pub calibration: CalibrationTransform,
    pub geometry: ExecutionGeometry,
    pub contract: PlannerContract,
    pub always_on: AlwaysOnConfig,
    pub response: ResponseConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseConfig {
    pub retry_limit: u32,
    pub replan_on_failure: bool,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        let d = PhaseConfig::default();
        ResponseConfig { retry_limit: d.retry_limit, replan_on_failure: d.replan_on_failure }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Config::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.monitor.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.perception.validate().map_err(ConfigError::Invalid)?;
        self.planner_faults.validate().map_err(ConfigError::Invalid)?;
        self.execution_faults.validate().map_err(ConfigError::Invalid)?;
        if !(self.calibration.scale.is_finite() && self.calibration.scale != 0.0) {
            return Err(ConfigError::Invalid("calibration scale must be non-zero".into()));
        }
        if self.always_on.max_queries == 0 || self.always_on.period_frames == 0 {
            return Err(ConfigError::Invalid("always-on schedule needs a positive period and query cap".into()));
        }
        if self.contract.max_actions == 0 {
            return Err(ConfigError::Invalid("max_actions must be positive".into()));
        }
        Ok(())
    }

    /// Response-phase settings derived from this config.
    pub fn phase(&self) -> PhaseConfig {
        PhaseConfig {
            retry_limit: self.response.retry_limit,
            replan_on_failure: self.response.replan_on_failure,
            calibration: self.calibration,
            geometry: ExecutionGeometry { max_actions: self.contract.max_actions, ..self.geometry },
            execution_faults: self.execution_faults.clone(),
            perception: self.perception.clone(),
            monitor: self.monitor,
            contract: self.contract.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = Config::from_toml("[execution_faults]\np_place_miss = 0.25\n[monitor]\nn_off = 10\n").unwrap();
        assert_eq!(c.execution_faults.p_place_miss, 0.25);
        assert_eq!(c.monitor.n_off, 10);
        assert_eq!(c.monitor.n_on, 3);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml("[execution_faults]\np_collision = 1.5\n").is_err());
        assert!(Config::from_toml("[monitor]\ntheta_on = 1.0\ntheta_off = 2.0\n").is_err());
        assert!(Config::from_toml("[nonsense]\nx = 1\n").is_err());
    }
}
