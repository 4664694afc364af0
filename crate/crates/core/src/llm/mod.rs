//! Uniform text-generation interface with two-tier routing.
//!
//! Every model call in the engine goes through [`Gateway::complete`]. Backends
//! only see the prompt text; the gateway validates requests, picks a backend
//! for the request's role, and retries transient failures.

mod fault;
mod remote;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use fault::{FaultInjectingBackend, FaultKind, FaultRule};
pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{MatchMode, ScriptEntry, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Perception,
    Thinking,
    GoalCheck,
    GoalCheckSota,
    Narrative,
    CopilotStage,
    Summarize,
}

impl RoleTag {
    pub fn tier(self) -> Tier {
        match self {
            RoleTag::GoalCheckSota => Tier::Sota,
            _ => Tier::Light,
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Light,
    Sota,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role_tag: RoleTag,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f32,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl CompletionRequest {
    pub fn new(role_tag: RoleTag, prompt: impl Into<String>) -> Self {
        Self { role_tag, prompt: prompt.into(), max_tokens: 512, temperature: 0.7, stop: Vec::new() }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    fn check(&self) -> Result<(), LlmError> {
        if self.prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("prompt must be nonempty".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest("temperature must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_units: u32,
    pub output_units: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub usage: Usage,
}

/// Failure reported by a single backend attempt.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("request timed out")]
    Timeout,
    #[error("backend failure: {0}")]
    Fatal(String),
    #[error("script exhausted for role {0}")]
    ScriptExhausted(RoleTag),
    #[error("injected fault on call {0}")]
    Injected(usize),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("no backend configured for the {0:?} tier")]
    UnconfiguredTier(Tier),
    #[error("backend '{backend}' unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },
    #[error("backend '{0}' timed out")]
    TimeoutExceeded(String),
    #[error("scripted backend '{backend}' has no response left for role {role}")]
    ScriptExhausted { backend: String, role: RoleTag },
    #[error("fault injected by backend '{backend}' on call {call}")]
    Injected { backend: String, call: usize },
}

impl LlmError {
    /// Errors that callers with a documented degraded mode may absorb.
    /// Script exhaustion and injected faults always propagate.
    pub fn is_degradable(&self) -> bool {
        matches!(
            self,
            LlmError::BackendUnavailable { .. } | LlmError::TimeoutExceeded(_) | LlmError::UnconfiguredTier(_)
        )
    }
}

/// A text-generation provider. Implementations receive the prompt verbatim.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { backoff_ms: vec![250, 1000] }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { backoff_ms: Vec::new() }
    }
}

/// Hash of the normalized prompt text (LF newlines, trailing whitespace
/// trimmed per line and overall). Scripts key on this value.
pub fn prompt_hash(prompt: &str) -> String {
    let normalized = prompt
        .replace("\r\n", "\n")
        .replace('\r', "\n")
        .lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n");
    hex::encode(Sha256::digest(normalized.trim_end().as_bytes()))
}

fn word_units(text: &str) -> u32 {
    u32::try_from(text.split_whitespace().count()).unwrap_or(u32::MAX)
}

#[derive(Clone, Default)]
pub struct Gateway {
    backends: BTreeMap<String, Arc<dyn Backend>>,
    light: Option<String>,
    sota: Option<String>,
    overrides: BTreeMap<RoleTag, String>,
    retry: RetryPolicy,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backends", &self.backends.keys().collect::<Vec<_>>())
            .field("light", &self.light)
            .field("sota", &self.sota)
            .field("overrides", &self.overrides)
            .finish()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    /// Single backend serving the lightweight tier only.
    pub fn single(backend: Arc<dyn Backend>) -> Self {
        Self::new().with_light(backend)
    }

    pub fn two_tier(light: Arc<dyn Backend>, sota: Arc<dyn Backend>) -> Self {
        Self::new().with_light(light).with_sota(sota)
    }

    pub fn with_light(mut self, backend: Arc<dyn Backend>) -> Self {
        self.light = Some(backend.id().to_string());
        self.backends.insert(backend.id().to_string(), backend);
        self
    }

    pub fn with_sota(mut self, backend: Arc<dyn Backend>) -> Self {
        self.sota = Some(backend.id().to_string());
        self.backends.insert(backend.id().to_string(), backend);
        self
    }

    /// Routes one role to a specific backend regardless of tier.
    pub fn with_override(mut self, role: RoleTag, backend: Arc<dyn Backend>) -> Self {
        self.overrides.insert(role, backend.id().to_string());
        self.backends.insert(backend.id().to_string(), backend);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn route_tier(&self, role: RoleTag) -> Result<&str, LlmError> {
        if let Some(id) = self.overrides.get(&role) {
            return Ok(id);
        }
        let tier = role.tier();
        match tier {
            Tier::Light => self.light.as_deref(),
            Tier::Sota => self.sota.as_deref(),
        }
        .ok_or(LlmError::UnconfiguredTier(tier))
    }

    /// True when shadow assessment can run: both tiers configured on
    /// distinct backends.
    pub fn supports_shadow_assessment(&self) -> bool {
        match (self.route_tier(RoleTag::GoalCheck), self.route_tier(RoleTag::GoalCheckSota)) {
            (Ok(a), Ok(b)) => a != b,
            _ => false,
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        request.check()?;
        let backend_id = self.route_tier(request.role_tag)?.to_string();
        let backend = self.backends.get(&backend_id).ok_or_else(|| LlmError::BackendUnavailable {
            backend: backend_id.clone(),
            reason: "backend not registered".into(),
        })?;
        tracing::debug!(role = %request.role_tag, backend = %backend_id, prompt_hash = %prompt_hash(&request.prompt), "completion");
        let started = Instant::now();
        let mut attempt = 0usize;
        let outcome = loop {
            match backend.generate(request) {
                Ok(text) => break Ok(text),
                Err(err @ (BackendError::Transient(_) | BackendError::Timeout)) => {
                    let Some(&delay) = self.retry.backoff_ms.get(attempt) else {
                        break Err(err);
                    };
                    tracing::warn!(backend = %backend_id, attempt, error = %err, "retrying completion");
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(err) => break Err(err),
            }
        };
        let text = outcome.map_err(|err| match err {
            BackendError::Timeout => LlmError::TimeoutExceeded(backend_id.clone()),
            BackendError::Transient(reason) | BackendError::Fatal(reason) => {
                LlmError::BackendUnavailable { backend: backend_id.clone(), reason }
            }
            BackendError::ScriptExhausted(role) => LlmError::ScriptExhausted { backend: backend_id.clone(), role },
            BackendError::Injected(call) => LlmError::Injected { backend: backend_id.clone(), call },
        })?;
        let text = apply_stops(text, &request.stop);
        Ok(CompletionResult {
            usage: Usage { prompt_units: word_units(&request.prompt), output_units: word_units(&text) },
            text,
            backend_id,
            latency_ms: u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX),
        })
    }

    /// Builds a gateway from a configuration file. Relative script paths
    /// resolve against `base_dir`.
    pub fn from_config(config: &GatewayConfig, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut built: BTreeMap<String, Arc<dyn Backend>> = BTreeMap::new();
        for (id, spec) in &config.backends {
            let backend: Arc<dyn Backend> = match spec {
                BackendSpec::Scripted { script } => {
                    let path = base_dir.join(script);
                    let data = std::fs::read_to_string(&path)
                        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
                    Arc::new(ScriptedBackend::parse(id, &data).map_err(ConfigError::Script)?)
                }
                BackendSpec::Remote(remote) => Arc::new(RemoteBackend::new(id, remote.clone())),
            };
            built.insert(id.clone(), backend);
        }
        let lookup = |id: &String| built.get(id).cloned().ok_or_else(|| ConfigError::UnknownBackend(id.clone()));
        let mut gateway = Gateway::new();
        if let Some(id) = &config.tiers.light {
            gateway = gateway.with_light(lookup(id)?);
        }
        if let Some(id) = &config.tiers.sota {
            gateway = gateway.with_sota(lookup(id)?);
        }
        for (role, id) in &config.overrides {
            gateway = gateway.with_override(*role, lookup(id)?);
        }
        if let Some(retry) = &config.retry {
            gateway = gateway.with_retry(retry.clone());
        }
        Ok(gateway)
    }
}

fn apply_stops(mut text: String, stops: &[String]) -> String {
    if let Some(cut) = stops.iter().filter(|s| !s.is_empty()).filter_map(|s| text.find(s.as_str())).min() {
        text.truncate(cut);
    }
    text
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    pub light: Option<String>,
    pub sota: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Scripted { script: String },
    Remote(RemoteConfig),
}

/// Tier-to-backend mapping, usually read from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default)]
    pub tiers: TierConfig,
    #[serde(default)]
    pub overrides: BTreeMap<RoleTag, String>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
}

impl GatewayConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse gateway config: {0}")]
    Parse(String),
    #[error("cannot read script: {0}")]
    Io(String),
    #[error("invalid script: {0}")]
    Script(String),
    #[error("config references unknown backend '{0}'")]
    UnknownBackend(String),
}
