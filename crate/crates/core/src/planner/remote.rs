//! HTTP adapter for an external planner service.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{parse_reply, write_request};
use super::{Planner, PlannerError, PlannerOutput, PlannerRequest};

/// Environment variable naming the planner endpoint.
pub const ENDPOINT_ENV: &str = "EVASSIST_PLANNER_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_secs: f64,
    /// Forwarded verbatim in the request contract.
    pub prompt: String,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig { endpoint: String::new(), timeout_secs: 30.0, prompt: String::new() }
    }
}

impl RemoteConfig {
    /// Fills an empty endpoint from the environment.
    pub fn with_env(mut self) -> Self {
        if self.endpoint.is_empty() {
            if let Ok(url) = std::env::var(ENDPOINT_ENV) {
                self.endpoint = url;
            }
        }
        self
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }
}

pub struct RemotePlanner {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemotePlanner {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        RemotePlanner { config, agent }
    }
}

impl Planner for RemotePlanner {
    fn name(&self) -> &str {
        "remote"
    }

    fn plan(&mut self, request: &PlannerRequest) -> Result<PlannerOutput, PlannerError> {
        if self.config.endpoint.is_empty() {
            return Err(PlannerError::Transport(format!("no planner endpoint configured (set {ENDPOINT_ENV})")));
        }
        let mut request = request.clone();
        if request.contract.prompt.is_empty() {
            request.contract.prompt = self.config.prompt.clone();
        }
        let body = write_request(&request);
        let result = self
            .agent
            .post(&self.config.endpoint)
            .header("content-type", "application/json")
            .send(body.as_bytes());
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(PlannerError::Timeout(self.config.timeout())),
            Err(e) => return Err(PlannerError::Transport(e.to_string())),
        };
        let status = response.status();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(PlannerError::Timeout(self.config.timeout())),
            Err(e) => return Err(PlannerError::Transport(e.to_string())),
        };
        if !status.is_success() {
            return Err(PlannerError::Transport(format!("planner answered HTTP {status}")));
        }
        let response = parse_reply(&text, &request.contract)?;
        Ok(PlannerOutput { response, injected_fault: None })
    }
}
