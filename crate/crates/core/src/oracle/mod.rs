//! Uniform access to the reasoning backend.
//!
//! Every model call in the engine goes through [`Oracle::ask`], which stamps a
//! per-run nonce, checks the request context against the role's key schema,
//! records the request in a transcript and applies the retry policy. Three
//! backends exist: a live chat-completion endpoint, a scripted fixture replay
//! keyed by `(role, per-role ordinal)`, and a synthetic backend whose answers
//! are correct with a configurable probability.

mod embed;
mod live;
mod scripted;
mod synthetic;
mod templates;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use embed::{cosine, HashEmbedder, DEFAULT_EMBEDDING_DIM};
pub use live::{LiveBackend, LiveSettings, KEY_VAR, MODEL_VAR, URL_VAR};
pub use scripted::{FixtureRecord, RecordingBackend, ScriptedBackend};
pub use synthetic::{LandscapeMove, SyntheticBackend, SyntheticOracleParams, WrongProposal};
pub use templates::Templates;

use crate::error::{DomainError, OracleError};

/// What a request asks the backend to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    InitHypothesis,
    ExtractChallenges,
    GenerateHypothesis,
    ScoreHypothesis,
    SelectHypothesis,
    Sketch,
    Implement,
    DebugFix,
    AlignmentCheck,
    ComprehensiveAnalysis,
    Judge,
    BudgetDecision,
    Embed,
}

impl Role {
    pub const ALL: [Role; 13] = [
        Role::InitHypothesis,
        Role::ExtractChallenges,
        Role::GenerateHypothesis,
        Role::ScoreHypothesis,
        Role::SelectHypothesis,
        Role::Sketch,
        Role::Implement,
        Role::DebugFix,
        Role::AlignmentCheck,
        Role::ComprehensiveAnalysis,
        Role::Judge,
        Role::BudgetDecision,
        Role::Embed,
    ];

    /// Context keys a request of this role may carry.
    pub fn context_keys(self) -> &'static [&'static str] {
        match self {
            Role::InitHypothesis => &["task", "priors", "index", "avoid"],
            Role::ExtractChallenges => &["source", "task", "best_code", "feedback", "history", "limit"],
            Role::GenerateHypothesis => &["challenge", "best_code", "feedback", "task", "variant", "avoid"],
            Role::ScoreHypothesis => &["hypothesis", "component", "memory", "task"],
            Role::SelectHypothesis => &["pool", "pool_size", "memory_feedback", "best_score"],
            Role::Sketch => &["hypothesis", "base_code", "task"],
            Role::Implement => &["hypothesis", "sketch", "base_code", "task"],
            Role::DebugFix => &["code", "stderr", "diff", "task", "attempt"],
            Role::AlignmentCheck => &["code", "task"],
            Role::ComprehensiveAnalysis => &[
                "aspect",
                "hypothesis",
                "diff",
                "current_score",
                "best_score",
                "direction",
                "logs",
                "code",
                "best_code",
            ],
            Role::Judge => &["feedback", "gates", "current_score", "best_score", "direction", "hypothesis"],
            Role::BudgetDecision => &["remaining", "total", "exit_statuses", "best_curve"],
            Role::Embed => &["text"],
        }
    }

    /// File stem of the prompt template for this role.
    pub fn template_name(self) -> &'static str {
        match self {
            Role::InitHypothesis => "init_hypothesis",
            Role::ExtractChallenges => "extract_challenges",
            Role::GenerateHypothesis => "generate_hypothesis",
            Role::ScoreHypothesis => "score_hypothesis",
            Role::SelectHypothesis => "select_hypothesis",
            Role::Sketch => "sketch",
            Role::Implement => "implement",
            Role::DebugFix => "debug_fix",
            Role::AlignmentCheck => "alignment_check",
            Role::ComprehensiveAnalysis => "comprehensive_analysis",
            Role::Judge => "judge",
            Role::BudgetDecision => "budget_decision",
            Role::Embed => "embed",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Role {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .iter()
            .copied()
            .find(|r| r.to_string() == s.trim())
            .ok_or_else(|| OracleError::Fixture(format!("unknown role `{s}`")))
    }
}

pub type Context = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub role: Role,
    pub context: Context,
    pub nonce: u64,
}

impl OracleRequest {
    pub fn new(role: Role, context: Context, nonce: u64) -> Result<Self, OracleError> {
        let allowed = role.context_keys();
        if let Some(key) = context.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(OracleError::Schema { role, key: key.clone() });
        }
        Ok(Self { role, context, nonce })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.context.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub text: String,
    #[serde(default)]
    pub structured: Option<serde_json::Value>,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
}

impl OracleResponse {
    pub fn text(text: impl Into<String>) -> Self {
        let text = text.into();
        let structured = serde_json::from_str::<serde_json::Value>(text.trim())
            .ok()
            .filter(|v| v.is_object() || v.is_array());
        Self { text, structured, embedding: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retry: u32,
    pub wait_seconds: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retry: 12_000, wait_seconds: 5.0 }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.wait_seconds >= 0.0 && self.wait_seconds.is_finite()) {
            return Err(DomainError::Invalid(format!("retry wait {} must be >= 0", self.wait_seconds)));
        }
        Ok(())
    }
}

/// A reasoning backend.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError>;

    /// Deterministic backends are never retried.
    fn is_deterministic(&self) -> bool;

    fn name(&self) -> &str;
}

/// Calls `backend` under `policy`, returning the response and the number of
/// attempts it took. Only transient failures of non-deterministic backends
/// are retried; total attempts never exceed `max_retry + 1`.
pub fn with_retry(
    backend: &dyn Backend,
    request: &OracleRequest,
    policy: &RetryPolicy,
) -> Result<(OracleResponse, u32), OracleError> {
    policy.validate()?;
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        match backend.complete(request) {
            Ok(resp) => return Ok((resp, attempts)),
            Err(err) if err.is_transient() => {
                if backend.is_deterministic() || attempts > policy.max_retry {
                    return Err(OracleError::BackendUnavailable { attempts, last: err.to_string() });
                }
                log::warn!("{} attempt {attempts} failed: {err}; retrying", backend.name());
                if policy.wait_seconds > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(policy.wait_seconds));
                }
            }
            Err(err) => return Err(err),
        }
    }
}

/// Engine-facing client: nonce stamping, schema checks, transcript, retry.
pub struct Oracle {
    backend: Arc<dyn Backend>,
    policy: RetryPolicy,
    nonce: AtomicU64,
    transcript: Mutex<Vec<OracleRequest>>,
    embedder: HashEmbedder,
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Oracle")
            .field("backend", &self.backend.name())
            .field("policy", &self.policy)
            .field("nonce", &self.nonce.load(Ordering::SeqCst))
            .finish()
    }
}

impl Oracle {
    pub fn new(backend: Arc<dyn Backend>, policy: RetryPolicy) -> Self {
        Self {
            backend,
            policy,
            nonce: AtomicU64::new(0),
            transcript: Mutex::new(Vec::new()),
            embedder: HashEmbedder::default(),
        }
    }

    pub fn with_embedder(mut self, embedder: HashEmbedder) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn scripted(backend: ScriptedBackend) -> Self {
        Self::new(Arc::new(backend), RetryPolicy { max_retry: 0, wait_seconds: 0.0 })
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn is_deterministic(&self) -> bool {
        self.backend.is_deterministic()
    }

    pub fn ask<I, K, V>(&self, role: Role, context: I) -> Result<OracleResponse, OracleError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let context: Context = context.into_iter().map(|(k, v)| (k.into(), v.into())).collect();
        // Stamp and record under one lock so transcript order matches nonce order.
        let request = {
            let mut transcript = self.transcript.lock().expect("transcript lock poisoned");
            let nonce = self.nonce.fetch_add(1, Ordering::SeqCst) + 1;
            let request = OracleRequest::new(role, context, nonce)?;
            transcript.push(request.clone());
            request
        };
        let (response, _attempts) = with_retry(self.backend.as_ref(), &request, &self.policy)?;
        Ok(response)
    }

    /// Unit-norm embedding. Computed locally for every backend so cosine
    /// values are reproducible.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>, DomainError> {
        self.embedder.embed(text)
    }

    pub fn transcript(&self) -> Vec<OracleRequest> {
        self.transcript.lock().expect("transcript lock poisoned").clone()
    }

    pub fn transcript_roles(&self) -> Vec<Role> {
        self.transcript().into_iter().map(|r| r.role).collect()
    }

    pub fn calls(&self) -> usize {
        self.transcript.lock().expect("transcript lock poisoned").len()
    }

    pub fn clear_transcript(&self) {
        self.transcript.lock().expect("transcript lock poisoned").clear();
    }
}

/// Strips a fenced code block if the text contains one.
pub fn extract_code(text: &str) -> String {
    if let Some(start) = text.find("```") {
        let after = &text[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            return body[..end].to_string();
        }
    }
    text.to_string()
}
