//! Domain types shared by the optimization loop, the tree-search variant and
//! the event log.
//!
//! Scores are `Option<f64>`: `None` is a failed or ungraded run, never a
//! sentinel number. Every comparison between scores goes through
//! [`direction_adjusted_delta`], so "positive means better" holds everywhere
//! regardless of the task's metric direction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::DomainError;

/// A validation score. `None` marks a missing score (failed or ungraded run).
pub type Score = Option<f64>;

/// Whether larger metric values are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    /// Sign that maps a raw difference onto "positive is improvement".
    pub fn sign(self) -> f64 {
        match self {
            Direction::HigherBetter => 1.0,
            Direction::LowerBetter => -1.0,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::HigherBetter => f.write_str("higher_better"),
            Direction::LowerBetter => f.write_str("lower_better"),
        }
    }
}

/// Signed improvement of `h_new` over `h_ref`; positive means `h_new` is better.
pub fn direction_adjusted_delta(
    h_new: f64,
    h_ref: f64,
    direction: Direction,
) -> Result<f64, DomainError> {
    if !h_new.is_finite() || !h_ref.is_finite() {
        return Err(DomainError::NonFinite { h_new, h_ref });
    }
    Ok(match direction {
        Direction::HigherBetter => h_new - h_ref,
        Direction::LowerBetter => h_ref - h_new,
    })
}

/// The near-tie rule used before code-quality analysis: `delta > -tolerance`.
pub fn is_improvement(delta: f64, tolerance: f64) -> bool {
    debug_assert!(tolerance >= 0.0);
    delta > -tolerance
}

/// Delta between two possibly-missing scores. A present score always beats a
/// missing reference; a missing current score never improves.
pub fn score_delta(current: Score, reference: Score, direction: Direction) -> Option<f64> {
    match (current, reference) {
        (Some(c), Some(r)) => direction_adjusted_delta(c, r, direction).ok(),
        _ => None,
    }
}

/// True when `candidate` should replace `incumbent` as a trace best.
pub fn strictly_better(candidate: Score, incumbent: Score, direction: Direction) -> bool {
    match (candidate, incumbent) {
        (Some(_), None) => true,
        (Some(c), Some(i)) => direction_adjusted_delta(c, i, direction).is_ok_and(|d| d > 0.0),
        (None, _) => false,
    }
}

/// Column rules for the submission file a task expects.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubmissionSchema {
    #[serde(default)]
    pub columns: Vec<String>,
    #[serde(default)]
    pub rows: Option<usize>,
    /// Column name to value domain (`float`, `int`, `probability`, `string`,
    /// or `one_of:a|b|c`).
    #[serde(default)]
    pub domains: BTreeMap<String, String>,
}

/// A graded, executable problem bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub metric_name: String,
    pub direction: Direction,
    #[serde(skip)]
    pub bundle_path: PathBuf,
    pub dev_fraction: f64,
    pub time_limit_dev: f64,
    pub time_limit_full: f64,
    /// Interpreter used to launch solution scripts.
    #[serde(default = "default_runner")]
    pub runner: Vec<String>,
    #[serde(default = "default_solution_file")]
    pub solution_file: String,
    /// Optional starting script shipped with the bundle, relative to the bundle root.
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default)]
    pub submission: SubmissionSchema,
}

fn default_runner() -> Vec<String> {
    vec!["python3".to_string()]
}

fn default_solution_file() -> String {
    "solution.py".to_string()
}

impl Task {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id.trim().is_empty() {
            return Err(DomainError::Invalid("task id is empty".into()));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction <= 1.0) {
            return Err(DomainError::Invalid(format!(
                "dev_fraction {} outside (0, 1]",
                self.dev_fraction
            )));
        }
        if !(self.time_limit_dev > 0.0 && self.time_limit_dev <= self.time_limit_full) {
            return Err(DomainError::Invalid(format!(
                "time limits must satisfy 0 < dev ({}) <= full ({})",
                self.time_limit_dev, self.time_limit_full
            )));
        }
        if self.runner.is_empty() {
            return Err(DomainError::Invalid("runner command is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    WallClockSeconds,
    IterationCount,
}

/// Total compute budget `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub mode: BudgetMode,
    pub total: f64,
    pub consumed: f64,
    /// Extension slots used. A declined request also uses its slot.
    pub extensions_granted: u32,
    /// Total at construction; extension steps are sized from it.
    pub original_total: f64,
}

impl Budget {
    pub fn iterations(total: u64) -> Self {
        Self::new(BudgetMode::IterationCount, total as f64)
    }

    pub fn wall_clock(seconds: f64) -> Self {
        Self::new(BudgetMode::WallClockSeconds, seconds)
    }

    pub fn new(mode: BudgetMode, total: f64) -> Self {
        Self { mode, total, consumed: 0.0, extensions_granted: 0, original_total: total }
    }

    pub fn remaining(&self) -> f64 {
        (self.total - self.consumed).max(0.0)
    }

    pub fn exhausted(&self) -> bool {
        self.consumed >= self.total
    }
}

/// A candidate script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub id: String,
    pub code: String,
    pub parent_id: Option<String>,
    pub hypothesis_id: Option<String>,
    pub created_at: u64,
}

impl Solution {
    pub fn new(
        id: impl Into<String>,
        code: impl Into<String>,
        parent_id: Option<String>,
        hypothesis_id: Option<String>,
        created_at: u64,
    ) -> Result<Self, DomainError> {
        let code = code.into();
        if code.trim().is_empty() {
            return Err(DomainError::Invalid("solution code is empty".into()));
        }
        Ok(Self { id: id.into(), code, parent_id, hypothesis_id, created_at })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Data,
    FeatureEng,
    Model,
    Ensemble,
    Workflow,
}

impl Component {
    pub fn parse(tag: &str) -> Option<Self> {
        let norm: String =
            tag.trim().chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match norm.as_str() {
            "data" | "dataloading" => Some(Component::Data),
            "featureeng" | "featureengineering" | "features" | "feature" => Some(Component::FeatureEng),
            "model" | "models" => Some(Component::Model),
            "ensemble" => Some(Component::Ensemble),
            "workflow" | "pipeline" => Some(Component::Workflow),
            _ => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Component::Data => "Data",
            Component::FeatureEng => "FeatureEng",
            Component::Model => "Model",
            Component::Ensemble => "Ensemble",
            Component::Workflow => "Workflow",
        };
        f.write_str(s)
    }
}

/// Where a hypothesis came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Local,
    MemoryBest,
    MemorySampled,
    SelectorModified,
    SelectorGenerated,
}

/// A natural-language improvement direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub text: String,
    pub target_component: Component,
    pub challenge: String,
    pub scores: BTreeMap<String, f64>,
    pub total_score: f64,
    pub origin: Origin,
    /// Pool member this one was revised from (selector `Modify`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<String>,
}

impl Hypothesis {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        target_component: Component,
        challenge: impl Into<String>,
        origin: Origin,
    ) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            target_component,
            challenge: challenge.into(),
            scores: BTreeMap::new(),
            total_score: 0.0,
            origin,
            derived_from: None,
        }
    }
}

/// `perf_t = (h_t, h*)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfPair {
    pub current: Score,
    pub best: Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExitStatus {
    Ok,
    NonzeroExit,
    Timeout,
    ResourceKill,
}

impl fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExitStatus::Ok => "ok",
            ExitStatus::NonzeroExit => "nonzero_exit",
            ExitStatus::Timeout => "timeout",
            ExitStatus::ResourceKill => "resource_kill",
        };
        f.write_str(s)
    }
}

/// Logs and diff collected from one execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub stdout_excerpt: String,
    pub stderr_excerpt: String,
    pub runtime_log: String,
    /// Unified diff against the trace's current best.
    pub code_diff: String,
    pub exit_status: ExitStatus,
    pub wall_seconds: f64,
}

impl ExecutionTrace {
    /// Trace for an attempt that never reached the executor.
    pub fn not_run(note: impl Into<String>) -> Self {
        Self {
            stdout_excerpt: String::new(),
            stderr_excerpt: String::new(),
            runtime_log: note.into(),
            code_diff: String::new(),
            exit_status: ExitStatus::NonzeroExit,
            wall_seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gate {
    Format,
    Alignment,
    Comprehensive,
    Judge,
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Analysis from whichever validation stage determined the outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReason {
    pub gate: Gate,
    pub verdict_text: String,
    pub hypothesis_verified: Option<bool>,
    pub code_quality_notes: Option<String>,
    pub leakage_findings: Vec<String>,
}

impl DiagnosticReason {
    pub fn new(gate: Gate, verdict_text: impl Into<String>) -> Self {
        Self {
            gate,
            verdict_text: verdict_text.into(),
            hypothesis_verified: None,
            code_quality_notes: None,
            leakage_findings: Vec::new(),
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.leakage_findings.is_empty() || self.gate == Gate::Alignment
    }
}

/// `f_t = (perf_t, trace_t, reason_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredFeedback {
    pub perf: PerfPair,
    pub trace: ExecutionTrace,
    pub reason: DiagnosticReason,
}

impl StructuredFeedback {
    /// Compact text rendering used in oracle request contexts.
    pub fn summary(&self) -> String {
        format!(
            "score={} best={} exit={} gate={} verdict={}",
            fmt_score(self.perf.current),
            fmt_score(self.perf.best),
            self.trace.exit_status,
            self.reason.gate,
            self.reason.verdict_text.lines().next().unwrap_or("")
        )
    }
}

pub fn fmt_score(score: Score) -> String {
    match score {
        Some(v) => format!("{v}"),
        None => "missing".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub trace_id: u32,
    pub iteration: u32,
    pub hypothesis: Hypothesis,
    pub solution_id: String,
    pub feedback: StructuredFeedback,
    pub decision: bool,
    pub delta: Option<f64>,
}

/// Per-trace optimizer state, owned by one trace worker.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceState {
    pub trace_id: u32,
    pub best_solution: Solution,
    pub best_score: Score,
    pub history: Vec<IterationRecord>,
    pub n_succ: u32,
    pub n_fail: u32,
}

impl TraceState {
    pub fn new(trace_id: u32, initial: Solution) -> Self {
        Self { trace_id, best_solution: initial, best_score: None, history: Vec::new(), n_succ: 0, n_fail: 0 }
    }

    /// Appends an iteration, promoting its solution when accepted and strictly better.
    pub fn record(&mut self, record: IterationRecord, solution: &Solution, direction: Direction) {
        if record.decision {
            self.n_succ += 1;
            if strictly_better(record.feedback.perf.current, self.best_score, direction) {
                self.best_score = record.feedback.perf.current;
                self.best_solution = solution.clone();
            }
        } else {
            self.n_fail += 1;
        }
        self.history.push(record);
    }

    /// Recomputes `(best_score, n_succ, n_fail)` from the history alone.
    pub fn replay_summary(&self, direction: Direction) -> (Score, u32, u32) {
        let mut best = None;
        let (mut succ, mut fail) = (0, 0);
        for rec in &self.history {
            if rec.decision {
                succ += 1;
                if strictly_better(rec.feedback.perf.current, best, direction) {
                    best = rec.feedback.perf.current;
                }
            } else {
                fail += 1;
            }
        }
        (best, succ, fail)
    }
}
