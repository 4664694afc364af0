use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{Backend, BackendError, CompletionRequest, RoleTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultRule {
    /// Fail the n-th call (1-based) made through this wrapper.
    NthCall(usize),
    /// Fail every call carrying this role tag.
    Role(RoleTag),
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// A hard fault that no degraded mode absorbs.
    Fatal,
    /// Looks like an unavailable provider; callers with fallbacks degrade.
    Unavailable,
}

/// Wraps a backend and fails selected calls. Used to test round atomicity
/// and degraded modes.
pub struct FaultInjectingBackend {
    inner: Arc<dyn Backend>,
    rule: FaultRule,
    kind: FaultKind,
    calls: AtomicUsize,
}

impl FaultInjectingBackend {
    pub fn new(inner: Arc<dyn Backend>, rule: FaultRule, kind: FaultKind) -> Self {
        Self { inner, rule, kind, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for FaultInjectingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let hit = match self.rule {
            FaultRule::NthCall(n) => call == n,
            FaultRule::Role(role) => request.role_tag == role,
            FaultRule::Always => true,
        };
        if !hit {
            return self.inner.generate(request);
        }
        match self.kind {
            FaultKind::Fatal => Err(BackendError::Injected(call)),
            FaultKind::Unavailable => Err(BackendError::Fatal(format!("injected outage on call {call}"))),
        }
    }
}
