use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{prompt_hash, Backend, BackendError, CompletionRequest, RoleTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Answers any request whose normalized prompt hash equals `key`.
    ExactHash,
    /// Consumed once, in file order.
    Ordered,
    /// Repeatable answer used when nothing else matches.
    Default,
}

/// One record of a line-delimited script file.
///
/// `role` narrows ordered and default entries to requests with that role
/// tag; entries without a role serve any request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub mode: MatchMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<RoleTag>,
    pub response: String,
}

impl ScriptEntry {
    pub fn ordered(response: impl Into<String>) -> Self {
        Self { mode: MatchMode::Ordered, key: None, role: None, response: response.into() }
    }

    pub fn hashed(prompt: &str, response: impl Into<String>) -> Self {
        Self { mode: MatchMode::ExactHash, key: Some(prompt_hash(prompt)), role: None, response: response.into() }
    }

    pub fn fallback(response: impl Into<String>) -> Self {
        Self { mode: MatchMode::Default, key: None, role: None, response: response.into() }
    }

    pub fn for_role(mut self, role: RoleTag) -> Self {
        self.role = Some(role);
        self
    }
}

#[derive(Default)]
struct ScriptState {
    hashed: HashMap<String, String>,
    lanes: HashMap<Option<RoleTag>, VecDeque<String>>,
    defaults: HashMap<Option<RoleTag>, String>,
    received: Vec<(RoleTag, String)>,
}

/// Deterministic backend replaying a fixed script.
///
/// Lookup order: exact prompt hash, the ordered lane for the request's role,
/// the shared ordered lane, the role's default, the shared default.
pub struct ScriptedBackend {
    id: String,
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, entries: Vec<ScriptEntry>) -> Result<Self, String> {
        let mut state = ScriptState::default();
        for (i, entry) in entries.into_iter().enumerate() {
            match entry.mode {
                MatchMode::ExactHash => {
                    let key = entry.key.ok_or_else(|| format!("entry {i}: exact_hash entry needs a key"))?;
                    if state.hashed.insert(key.clone(), entry.response).is_some() {
                        return Err(format!("entry {i}: duplicate exact_hash key {key}"));
                    }
                }
                MatchMode::Ordered => state.lanes.entry(entry.role).or_default().push_back(entry.response),
                MatchMode::Default => {
                    if state.defaults.insert(entry.role, entry.response).is_some() {
                        return Err(format!("entry {i}: duplicate default entry"));
                    }
                }
            }
        }
        Ok(Self { id: id.into(), state: Mutex::new(state) })
    }

    /// Parses a line-delimited JSON script. Blank lines and lines starting
    /// with `#` are skipped.
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self, String> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(n, l)| serde_json::from_str::<ScriptEntry>(l).map_err(|e| format!("line {}: {e}", n + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(id, entries)
    }

    /// Prompts received so far, verbatim, in call order.
    pub fn received(&self) -> Vec<(RoleTag, String)> {
        self.state.lock().expect("script lock").received.clone()
    }

    /// Number of ordered entries not yet consumed.
    pub fn remaining(&self) -> usize {
        self.state.lock().expect("script lock").lanes.values().map(VecDeque::len).sum()
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let mut state = self.state.lock().expect("script lock");
        state.received.push((request.role_tag, request.prompt.clone()));
        if let Some(hit) = state.hashed.get(&prompt_hash(&request.prompt)) {
            return Ok(hit.clone());
        }
        for lane in [Some(request.role_tag), None] {
            if let Some(next) = state.lanes.get_mut(&lane).and_then(VecDeque::pop_front) {
                return Ok(next);
            }
        }
        for lane in [Some(request.role_tag), None] {
            if let Some(d) = state.defaults.get(&lane) {
                return Ok(d.clone());
            }
        }
        Err(BackendError::ScriptExhausted(request.role_tag))
    }
}
