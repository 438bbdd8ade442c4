use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::model::ExecutionTrace;
use crate::oracle::Role;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("non-finite score (h_new={h_new}, h_ref={h_ref})")]
    NonFinite { h_new: f64, h_ref: f64 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle backend unavailable after {attempts} attempt(s): {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("no scripted fixture for {role:?}#{ordinal}")]
    FixtureMiss { role: Role, ordinal: u32 },
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("request context violates the {role:?} schema: unexpected key `{key}`")]
    Schema { role: Role, key: String },
    #[error("bad fixture file: {0}")]
    Fixture(String),
    #[error("template error: {0}")]
    Template(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl OracleError {
    pub fn is_transient(&self) -> bool {
        matches!(self, OracleError::Transient(_))
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("task bundle missing or malformed at {path}: {reason}")]
    BundleMissing { path: PathBuf, reason: String },
    #[error("failed to spawn sandboxed process: {0}")]
    SandboxSpawnFailure(String),
    #[error("grader emitted a malformed score record: {0}")]
    GradeParseError(String),
    #[error("debugging exhausted after {attempts} fix attempt(s)")]
    DebugExhausted { attempts: u32, last: Box<ExecutionTrace>, code: String },
    #[error("every seed failed to produce a score")]
    AllSeedsFailed,
    #[error("invalid seed list: {0}")]
    BadSeeds(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("success memory is empty")]
    EmptyMemory,
}

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("hypothesis duplicates an earlier one in this trace: {0}")]
    DuplicateHypothesis(String),
    #[error("malformed hypothesis score payload: {0}")]
    ScoreParseError(String),
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("implementation failed: {reason}")]
    ImplementationFailed { reason: String, trace: Box<ExecutionTrace>, code: Option<String> },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("could not obtain pairwise-distinct initial hypotheses: {0}")]
    DiversificationFailed(String),
    #[error("unparsable selector response: {0}")]
    SelectorParseError(String),
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("node {0} has no children")]
    LeafNode(usize),
    #[error("node {node} at depth {depth} may not be expanded (max depth {max_depth})")]
    ExpansionRefused { node: usize, depth: u32, max_depth: u32 },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("event log contains no iterations")]
    EmptyLog,
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two observations, got {0}")]
    TooShort(usize),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("sequence gap: expected seq {expected}, got {got}")]
    SeqGap { expected: u64, got: u64 },
    #[error("corrupt event log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("event log i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Umbrella error for whole-run operations.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("internal invariant breached: {0}")]
    Invariant(String),
}

impl EngineError {
    /// True when the root cause is the reasoning backend giving up.
    pub fn is_oracle_exhaustion(&self) -> bool {
        let oracle = match self {
            EngineError::Oracle(e) => Some(e),
            EngineError::Reasoning(ReasoningError::Oracle(e)) => Some(e),
            EngineError::Selection(SelectionError::Oracle(e)) => Some(e),
            EngineError::Selection(SelectionError::Reasoning(ReasoningError::Oracle(e))) => Some(e),
            EngineError::Exec(ExecError::Oracle(e)) => Some(e),
            _ => None,
        };
        matches!(oracle, Some(OracleError::BackendUnavailable { .. }) | Some(OracleError::FixtureMiss { .. }))
    }

    pub fn is_bundle_error(&self) -> bool {
        matches!(self, EngineError::Exec(ExecError::BundleMissing { .. }))
    }
}
