//! Parallel traces sharing a success memory: diversified initialisation,
//! candidate pools, cross-trace selection, budget control and final
//! multi-seed selection.

use std::fs;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, EngineError, ExecError, ReasoningError, SelectionError};
use crate::executor::{ExecKind, ExecMode, Executor, SeedEvalReport, TimeoutState};
use crate::mcts::RewardMode;
use crate::memory::{KernelParams, SharedMemory, SuccessMemory};
use crate::model::{
    fmt_score, score_delta, Budget, BudgetMode, Component, DiagnosticReason, Direction, ExecutionTrace, ExitStatus,
    Gate, Hypothesis, IterationRecord, Origin, PerfPair, Score, Solution, StructuredFeedback, Task, TraceState,
};
use crate::oracle::{Oracle, RetryPolicy, Role};
use crate::persistence::{EventBody, FinalInfo, LogHeader, PoolEntry, Recorder, RunReport, Strategy};
use crate::reasoning::{
    adaptive_lambda, extract_challenges, generate_hypothesis, implement, memory_digest, normalize_text,
    parse_hypothesis, prioritize, select_topk_sample, HypothesisOptions, ReasoningContext, ScoringWeights,
};
use crate::validation::{validate, GateOutcome, Validation, ValidationInput, ValidationMode};

/// Run configuration. Keys follow the hyperparameter names of the
/// reference setup where one exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub chat_model: String,
    pub temperature: f64,
    pub max_retry: u32,
    pub retry_wait_seconds: f64,
    /// Hours; the budget in wall-clock mode.
    pub full_runtime: f64,

    pub enable_global_memory: bool,
    pub memory_save_type: String,
    pub kernel_alpha: f64,
    pub kernel_beta: f64,
    pub kernel_gamma: f64,

    pub llm_select_hypothesis: bool,
    pub simple_hypothesis: bool,
    pub unique_hypothesis: bool,
    pub enable_cross_trace_sharing: bool,
    pub challenges_per_source: usize,
    pub topk_sample: usize,
    pub scoring_weights: ScoringWeights,

    pub max_trace_num: u32,
    pub merge_hours: f64,
    pub debugging_semaphore: usize,
    pub running_semaphore: usize,
    pub feedback_semaphore: usize,
    pub cross_trace_diversity: bool,

    pub coder_timeout_multiplier: u32,
    pub runner_timeout_multiplier: u32,
    pub timeout_increase_stage: u32,
    pub timeout_stage_patience: u32,
    pub llm_decide_longer_runtime: bool,
    pub fix_seed_and_split: bool,
    #[serde(alias = "enable_multi-seed_selection")]
    pub enable_multi_seed_selection: bool,

    pub budget_mode: BudgetMode,
    pub budget_iterations: u64,
    /// Extension step as a fraction of the original budget.
    pub extension_fraction: f64,
    pub max_extensions: u32,
    /// Extensions are considered once remaining / total drops below this.
    pub extension_threshold: f64,
    pub max_fix_iters: u32,
    pub topk_final: usize,
    pub final_seeds: Vec<u64>,
    pub seed: u64,
    pub deterministic: bool,
    pub validation_mode: ValidationMode,
    pub improvement_tolerance: f64,

    pub c_puct: f64,
    pub expand_k: usize,
    pub max_depth: u32,
    pub reward: RewardMode,
    pub early_stop_score: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            chat_model: "gpt-5".into(),
            temperature: 1.0,
            max_retry: 12000,
            retry_wait_seconds: 5.0,
            full_runtime: 12.0,
            enable_global_memory: true,
            memory_save_type: "full".into(),
            kernel_alpha: 1.0,
            kernel_beta: 1.0,
            kernel_gamma: 0.05,
            llm_select_hypothesis: true,
            simple_hypothesis: true,
            unique_hypothesis: true,
            enable_cross_trace_sharing: true,
            challenges_per_source: 3,
            topk_sample: 3,
            scoring_weights: ScoringWeights::default(),
            max_trace_num: 4,
            merge_hours: 3.0,
            debugging_semaphore: 3,
            running_semaphore: 3,
            feedback_semaphore: 1,
            cross_trace_diversity: true,
            coder_timeout_multiplier: 4,
            runner_timeout_multiplier: 4,
            timeout_increase_stage: 1,
            timeout_stage_patience: 2,
            llm_decide_longer_runtime: true,
            fix_seed_and_split: true,
            enable_multi_seed_selection: true,
            budget_mode: BudgetMode::IterationCount,
            budget_iterations: 20,
            extension_fraction: 0.25,
            max_extensions: 1,
            extension_threshold: 0.25,
            max_fix_iters: 3,
            topk_final: 2,
            final_seeds: vec![0, 1, 2],
            seed: 0,
            deterministic: false,
            validation_mode: ValidationMode::Hierarchical,
            improvement_tolerance: 0.0,
            c_puct: 1.0,
            expand_k: 3,
            max_depth: 10,
            reward: RewardMode::Score,
            early_stop_score: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.max_trace_num == 0 {
            return bad("max_trace_num must be at least 1".into());
        }
        if self.debugging_semaphore == 0 || self.running_semaphore == 0 || self.feedback_semaphore == 0 {
            return bad("semaphore sizes must be at least 1".into());
        }
        if self.memory_save_type != "full" {
            return bad(format!("memory_save_type `{}` is not supported (only `full`)", self.memory_save_type));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        if !(self.retry_wait_seconds >= 0.0 && self.full_runtime >= 0.0 && self.merge_hours > 0.0) {
            return bad("retry_wait_seconds and full_runtime must be >= 0, merge_hours > 0".into());
        }
        if self.coder_timeout_multiplier == 0 || self.runner_timeout_multiplier == 0 || self.timeout_increase_stage == 0 {
            return bad("timeout multipliers and timeout_increase_stage must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.extension_threshold) || !(self.extension_fraction.is_finite() && self.extension_fraction >= 0.0) {
            return bad("extension_threshold must lie in [0, 1] and extension_fraction be >= 0".into());
        }
        if self.topk_final == 0 || self.topk_sample == 0 || self.challenges_per_source == 0 {
            return bad("topk_final, topk_sample and challenges_per_source must be at least 1".into());
        }
        if self.enable_multi_seed_selection && self.final_seeds.is_empty() {
            return bad("final_seeds is empty while enable_multi_seed_selection is on".into());
        }
        if self.expand_k == 0 || self.max_depth == 0 || !(self.c_puct.is_finite() && self.c_puct >= 0.0) {
            return bad("expand_k and max_depth must be >= 1, c_puct >= 0".into());
        }
        self.kernel().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scoring_weights.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelParams, crate::error::DomainError> {
        KernelParams::new(self.kernel_alpha, self.kernel_beta, self.kernel_gamma)
    }

    pub fn budget(&self) -> Budget {
        match self.budget_mode {
            BudgetMode::IterationCount => Budget::iterations(self.budget_iterations),
            BudgetMode::WallClockSeconds => Budget::wall_clock(self.full_runtime * 3600.0),
        }
    }

    pub fn permits(&self) -> crate::executor::Permits {
        crate::executor::Permits::new(self.running_semaphore, self.debugging_semaphore, self.feedback_semaphore)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { max_retry: self.max_retry, wait_seconds: self.retry_wait_seconds }
    }

    fn timeout(&self, cap: u32) -> TimeoutState {
        TimeoutState::new(self.timeout_increase_stage, self.timeout_stage_patience, cap)
    }

    pub fn run_timeout(&self) -> TimeoutState {
        self.timeout(self.runner_timeout_multiplier)
    }

    pub fn coder_timeout(&self) -> TimeoutState {
        self.timeout(self.coder_timeout_multiplier)
    }

    pub(crate) fn exec_seed(&self, iteration: u32) -> u64 {
        if self.fix_seed_and_split {
            self.seed
        } else {
            self.seed.wrapping_add(u64::from(iteration))
        }
    }
}

pub fn log_header(task: &Task, cfg: &RunConfig) -> LogHeader {
    let mut h = LogHeader::new(Strategy::Multitrace, &task.id, &task.metric_name, task.direction);
    h.deterministic = cfg.deterministic;
    h.n_traces = cfg.max_trace_num;
    h.seed = cfg.seed;
    h
}

fn format_priors(priors: &[String]) -> String {
    priors.iter().map(|p| format!("- {}", p.lines().next().unwrap_or(""))).collect::<Vec<_>>().join("\n")
}

/// `n` initial hypotheses; request `i` carries the `i - 1` earlier ones when
/// `enforce` is set, and a repeated text is re-prompted once.
pub fn init_diversified(task: &Task, n: u32, oracle: &Oracle, enforce: bool) -> Result<Vec<Hypothesis>, SelectionError> {
    if n == 0 {
        return Err(SelectionError::Reasoning(ReasoningError::Invalid("need at least one trace".into())));
    }
    let mut out: Vec<Hypothesis> = Vec::new();
    for i in 1..=n {
        let priors: Vec<String> = if enforce { out.iter().map(|h| h.text.clone()).collect() } else { Vec::new() };
        let seen: Vec<String> = priors.iter().map(|p| normalize_text(p)).collect();
        let prior_text = format_priors(&priors);
        let index = i.to_string();
        let mut avoid = String::new();
        let mut retried = false;
        let (text, component) = loop {
            let resp = oracle.ask(
                Role::InitHypothesis,
                [
                    ("task", task.description.as_str()),
                    ("priors", prior_text.as_str()),
                    ("index", index.as_str()),
                    ("avoid", avoid.as_str()),
                ],
            )?;
            let (text, component) = parse_hypothesis(&resp.text);
            if text.trim().is_empty() {
                return Err(SelectionError::DiversificationFailed("empty initial hypothesis".into()));
            }
            if !seen.contains(&normalize_text(&text)) {
                break (text, component);
            }
            if retried {
                return Err(SelectionError::DiversificationFailed(text));
            }
            retried = true;
            avoid = format!("This direction was already taken by another trace: {text}");
        };
        out.push(Hypothesis::new(
            format!("t{i}-init"),
            text,
            component.unwrap_or(Component::Workflow),
            "initial direction",
            Origin::Local,
        ));
    }
    Ok(out)
}

/// Kernel inputs for the memory-sampled pool member.
#[derive(Debug, Clone, Copy)]
pub struct PoolQuery<'a> {
    pub embedding: Option<&'a [f64]>,
    pub kernel: KernelParams,
    pub iteration: u32,
    pub h_star: Score,
    pub direction: Direction,
}

/// Local hypotheses, then the memory's best entry, then a kernel sample,
/// de-duplicated by exact text (first occurrence wins).
pub fn build_candidate_pool<R: Rng + ?Sized>(
    local: &[Hypothesis],
    memory: &SuccessMemory,
    query: &PoolQuery<'_>,
    rng: &mut R,
) -> Result<Vec<Hypothesis>, SelectionError> {
    let mut pool: Vec<Hypothesis> = local.to_vec();
    if !memory.is_empty() {
        let mut best = memory.best_entry()?.hypothesis.clone();
        best.origin = Origin::MemoryBest;
        pool.push(best);
        if let Some(emb) = query.embedding {
            let mut sampled = memory
                .sample_similar(emb, &query.kernel, query.iteration, query.h_star, query.direction, rng)?
                .hypothesis
                .clone();
            sampled.origin = Origin::MemorySampled;
            pool.push(sampled);
        }
    }
    let mut seen = std::collections::HashSet::new();
    pool.retain(|h| seen.insert(h.text.clone()));
    if pool.is_empty() {
        return Err(SelectionError::EmptyCandidateSet);
    }
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectorAction {
    /// 0-based pool index.
    Select(usize),
    Modify(usize, String),
    Generate(String),
}

fn pool_index(digits: &str, pool_size: usize, text: &str) -> Result<usize, SelectionError> {
    let n: usize = digits.trim().parse().map_err(|_| SelectionError::SelectorParseError(text.trim().to_string()))?;
    if n == 0 || n > pool_size {
        return Err(SelectionError::SelectorParseError(format!("#{n} is not in a pool of {pool_size}: {}", text.trim())));
    }
    Ok(n - 1)
}

/// Parses `Select #i`, `Modify #i: text` or `Generate: text` (1-based).
pub fn parse_selector(text: &str, pool_size: usize) -> Result<SelectorAction, SelectionError> {
    let trimmed = text.trim();
    let lower = trimmed.to_lowercase();
    let start = ["select", "modify", "generate"]
        .iter()
        .filter_map(|k| lower.find(k).map(|i| (i, *k)))
        .min()
        .ok_or_else(|| SelectionError::SelectorParseError(trimmed.to_string()))?;
    let rest = &trimmed[start.0 + start.1.len()..];
    let rest_l = rest.trim_start();
    match start.1 {
        "select" => {
            let digits: String = rest_l.trim_start_matches('#').chars().take_while(char::is_ascii_digit).collect();
            Ok(SelectorAction::Select(pool_index(&digits, pool_size, trimmed)?))
        }
        "modify" => {
            let body = rest_l.trim_start_matches('#');
            let digits: String = body.chars().take_while(char::is_ascii_digit).collect();
            let idx = pool_index(&digits, pool_size, trimmed)?;
            let revised = body[digits.len()..].trim_start().trim_start_matches(':').trim();
            if revised.is_empty() {
                return Err(SelectionError::SelectorParseError(format!("modify without text: {trimmed}")));
            }
            Ok(SelectorAction::Modify(idx, revised.to_string()))
        }
        _ => {
            let body = rest_l.trim_start_matches(':').trim();
            if body.is_empty() {
                return Err(SelectionError::SelectorParseError(format!("generate without text: {trimmed}")));
            }
            Ok(SelectorAction::Generate(body.to_string()))
        }
    }
}

/// Asks the selector to pick, revise or replace a pool member. The result
/// carries `new_id`; memory-derived picks link back through `derived_from`.
pub fn cross_trace_select(
    pool: &[Hypothesis],
    memory: &SuccessMemory,
    best_score: Score,
    new_id: &str,
    oracle: &Oracle,
) -> Result<Hypothesis, SelectionError> {
    if pool.is_empty() {
        return Err(SelectionError::EmptyCandidateSet);
    }
    let listing = pool
        .iter()
        .enumerate()
        .map(|(i, h)| format!("#{} [{:?}, {}] {}", i + 1, h.origin, h.target_component, h.text))
        .collect::<Vec<_>>()
        .join("\n");
    let feedback = pool
        .iter()
        .enumerate()
        .map(|(i, h)| match memory.entries().iter().find(|e| e.hypothesis.text == h.text) {
            Some(e) => format!("#{}: dh={:+.6} {}", i + 1, e.delta, e.feedback.summary()),
            None => format!("#{}: no recorded feedback", i + 1),
        })
        .collect::<Vec<_>>()
        .join("\n");
    let size = pool.len().to_string();
    let best = fmt_score(best_score);
    let resp = oracle.ask(
        Role::SelectHypothesis,
        [
            ("pool", listing.as_str()),
            ("pool_size", size.as_str()),
            ("memory_feedback", feedback.as_str()),
            ("best_score", best.as_str()),
        ],
    )?;
    Ok(match parse_selector(&resp.text, pool.len())? {
        SelectorAction::Select(i) => {
            let mut h = pool[i].clone();
            if h.origin != Origin::Local {
                h.derived_from = Some(h.id.clone());
                h.id = new_id.to_string();
            }
            h
        }
        SelectorAction::Modify(i, text) => {
            let parent = &pool[i];
            let (body, component) = parse_hypothesis(&text);
            let mut h = Hypothesis::new(
                new_id,
                body,
                component.unwrap_or(parent.target_component),
                parent.challenge.clone(),
                Origin::SelectorModified,
            );
            h.derived_from = Some(parent.id.clone());
            h
        }
        SelectorAction::Generate(text) => {
            let (body, component) = parse_hypothesis(&text);
            Hypothesis::new(new_id, body, component.unwrap_or(Component::Workflow), "selector", Origin::SelectorGenerated)
        }
    })
}

/// Evidence shown to the budget oracle.
#[derive(Debug, Clone, Default)]
pub struct BudgetEvidence {
    pub exit_statuses: Vec<ExitStatus>,
    pub best_curve: Vec<Score>,
}

/// Extension policy from the run configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtensionPolicy {
    pub enabled: bool,
    pub fraction: f64,
    pub cap: u32,
    pub threshold: f64,
}

impl From<&RunConfig> for ExtensionPolicy {
    fn from(cfg: &RunConfig) -> Self {
        Self {
            enabled: cfg.llm_decide_longer_runtime,
            fraction: cfg.extension_fraction,
            cap: cfg.max_extensions,
            threshold: cfg.extension_threshold,
        }
    }
}

/// True when the policy would consult the oracle for this budget.
pub fn extension_due(budget: &Budget, policy: &ExtensionPolicy) -> bool {
    policy.enabled && budget.extensions_granted < policy.cap && budget.remaining() < policy.threshold * budget.total
}

/// Possibly extends the budget by `fraction` of the original total. Any
/// oracle failure or unclear answer leaves it unchanged.
pub fn adjust_budget(budget: &Budget, evidence: &BudgetEvidence, oracle: &Oracle, policy: &ExtensionPolicy) -> Budget {
    if !extension_due(budget, policy) {
        return budget.clone();
    }
    let statuses = evidence.exit_statuses.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    let curve = evidence.best_curve.iter().map(|s| fmt_score(*s)).collect::<Vec<_>>().join(",");
    let remaining = budget.remaining().to_string();
    let total = budget.total.to_string();
    let resp = oracle.ask(
        Role::BudgetDecision,
        [
            ("remaining", remaining.as_str()),
            ("total", total.as_str()),
            ("exit_statuses", statuses.as_str()),
            ("best_curve", curve.as_str()),
        ],
    );
    let extend = match resp {
        Ok(r) => r.text.trim().to_lowercase().starts_with("extend"),
        Err(e) => {
            log::warn!("budget decision unavailable, keeping budget: {e}");
            false
        }
    };
    let mut out = budget.clone();
    if extend {
        out.total += policy.fraction * budget.original_total;
        out.extensions_granted += 1;
    }
    out
}

/// A trace's best at the end of optimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBest {
    pub trace_id: u32,
    pub solution: Solution,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalChoice {
    pub trace_id: u32,
    pub solution: Solution,
    pub validation_score: f64,
    pub seeds: Option<SeedEvalReport>,
}

/// Indices of the top `k` candidates by validation score, ties to the
/// lower trace id.
pub fn rank_by_validation(cands: &[TraceBest], k: usize, direction: Direction) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (direction.sign() * cands[a].score, direction.sign() * cands[b].score);
        y.total_cmp(&x).then(cands[a].trace_id.cmp(&cands[b].trace_id))
    });
    idx.truncate(k);
    idx
}

/// Index of the best `(trace_id, mean)` pair; ties go to the lower trace id.
pub fn argmax_mean(means: &[(u32, f64)], direction: Direction) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(id, m)) in means.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (bid, bm) = means[b];
                let (x, y) = (direction.sign() * m, direction.sign() * bm);
                x > y || (x == y && id < bid)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Re-runs the top `k` trace bests on every seed and keeps the best mean.
pub fn final_select(
    cands: &[TraceBest],
    k: usize,
    seeds: &[u64],
    executor: &Executor,
    direction: Direction,
    timeout: &TimeoutState,
) -> Result<FinalChoice, ExecError> {
    if cands.is_empty() {
        return Err(ExecError::AllSeedsFailed);
    }
    let top = rank_by_validation(cands, k.max(1), direction);
    let mut reports = Vec::with_capacity(top.len());
    for &i in &top {
        reports.push(executor.multi_seed_eval(&cands[i].solution, seeds, timeout)?);
    }
    let means: Vec<(u32, f64)> = top.iter().zip(&reports).map(|(&i, r)| (cands[i].trace_id, r.mean)).collect();
    let pick = argmax_mean(&means, direction).expect("non-empty");
    let c = &cands[top[pick]];
    Ok(FinalChoice {
        trace_id: c.trace_id,
        solution: c.solution.clone(),
        validation_score: c.score,
        seeds: Some(reports.swap_remove(pick)),
    })
}

/// Result of a run, complete or not.
#[derive(Debug)]
pub struct RunOutcome {
    pub best: Option<Solution>,
    pub best_trace: Option<u32>,
    pub report: RunReport,
    pub traces: Vec<TraceState>,
    pub memory: SuccessMemory,
    pub budget: Budget,
    pub error: Option<EngineError>,
}

/// What a trace evaluates next.
#[derive(Debug, Clone)]
pub(crate) enum Candidate {
    Ready { hypothesis: Hypothesis, solution: Solution },
    Failed { hypothesis: Hypothesis, solution_id: String, reason: String, trace: ExecutionTrace, code: Option<String> },
}

impl Candidate {
    pub(crate) fn from_implement(
        hypothesis: Hypothesis,
        solution_id: &str,
        result: Result<crate::reasoning::Implemented, ReasoningError>,
    ) -> Result<Self, ReasoningError> {
        match result {
            Ok(done) => Ok(Candidate::Ready { hypothesis, solution: done.solution }),
            Err(ReasoningError::ImplementationFailed { reason, trace, code }) => Ok(Candidate::Failed {
                hypothesis,
                solution_id: solution_id.to_string(),
                reason,
                trace: *trace,
                code,
            }),
            Err(e) => Err(e),
        }
    }

    pub(crate) fn solution(&self) -> Option<&Solution> {
        match self {
            Candidate::Ready { solution, .. } => Some(solution),
            Candidate::Failed { .. } => None,
        }
    }
}

/// Shared services for one run.
pub(crate) struct Env<'a> {
    pub task: &'a Task,
    pub cfg: &'a RunConfig,
    pub oracle: &'a Oracle,
    pub executor: &'a Executor,
    pub recorder: &'a Recorder,
}

/// Outcome of evaluating one candidate.
pub(crate) struct Evaluated {
    pub record: IterationRecord,
    pub solution: Solution,
}

impl Env<'_> {
    pub(crate) fn emit(&self, trace: u32, time: u64, body: EventBody) {
        self.recorder.emit(Some(trace), time, body);
    }

    /// Executes (when implemented), validates and records events for one
    /// iteration. `best` is the incumbent the candidate is judged against.
    pub(crate) fn evaluate(
        &self,
        trace: u32,
        iteration: u32,
        candidate: Candidate,
        best: (&Solution, Score),
        timeout: &mut TimeoutState,
    ) -> Result<Evaluated, EngineError> {
        let time = u64::from(iteration);
        let (best_solution, best_score) = best;
        let seed = self.cfg.exec_seed(iteration);
        let (hypothesis, solution, score, exec_trace, validation) = match candidate {
            Candidate::Ready { hypothesis, solution } => {
                let outcome = self.executor.execute(&solution, Some(&best_solution.code), ExecMode::full(seed), timeout)?;
                *timeout = timeout.escalate(outcome.trace.exit_status);
                self.emit(
                    trace,
                    time,
                    EventBody::Executed {
                        iteration,
                        solution: solution.clone(),
                        mode: ExecKind::FullData,
                        seed,
                        score: outcome.score,
                        trace: outcome.trace.clone(),
                    },
                );
                let input = ValidationInput {
                    task: self.task,
                    hypothesis: &hypothesis,
                    code: &solution.code,
                    best_code: &best_solution.code,
                    perf: PerfPair { current: outcome.score, best: best_score },
                    trace: &outcome.trace,
                    submission: outcome.submission.as_deref(),
                    tolerance: self.cfg.improvement_tolerance,
                };
                let validation = {
                    let _permit = self.executor.permits().feedback.acquire();
                    validate(&input, self.oracle, self.cfg.validation_mode)?
                };
                (hypothesis, solution, outcome.score, outcome.trace, validation)
            }
            Candidate::Failed { hypothesis, solution_id, reason, trace: failed_trace, code } => {
                let solution = Solution {
                    id: solution_id,
                    code: code.unwrap_or_default(),
                    parent_id: Some(best_solution.id.clone()),
                    hypothesis_id: Some(hypothesis.id.clone()),
                    created_at: u64::from(iteration),
                };
                self.emit(
                    trace,
                    time,
                    EventBody::Executed {
                        iteration,
                        solution: solution.clone(),
                        mode: ExecKind::DevSubset,
                        seed,
                        score: None,
                        trace: failed_trace.clone(),
                    },
                );
                let gate = GateOutcome {
                    gate: Gate::Format,
                    passed: false,
                    reason_text: format!("implementation failed: {reason}"),
                    findings: Vec::new(),
                };
                let validation = Validation {
                    decision: false,
                    reason: DiagnosticReason::new(Gate::Format, gate.reason_text.clone()),
                    gates: vec![gate],
                };
                (hypothesis, solution, None, failed_trace, validation)
            }
        };
        let gates = if validation.gates.is_empty() {
            vec![GateOutcome {
                gate: validation.reason.gate,
                passed: validation.decision,
                reason_text: validation.reason.verdict_text.clone(),
                findings: Vec::new(),
            }]
        } else {
            validation.gates.clone()
        };
        for outcome in gates {
            self.emit(trace, time, EventBody::GateOutcome { iteration, outcome });
        }
        let delta = match best_score {
            None => score.map(|_| 0.0),
            Some(_) => score_delta(score, best_score, self.task.direction),
        };
        let record = IterationRecord {
            trace_id: trace,
            iteration,
            hypothesis,
            solution_id: solution.id.clone(),
            feedback: StructuredFeedback {
                perf: PerfPair { current: score, best: best_score },
                trace: exec_trace,
                reason: validation.reason,
            },
            decision: validation.decision,
            delta,
        };
        self.emit(trace, time, EventBody::Decision { iteration, record: record.clone(), test_delta: None });
        Ok(Evaluated { record, solution })
    }
}

pub(crate) fn baseline_solution(task: &Task) -> Result<Option<Solution>, ExecError> {
    let Some(rel) = &task.baseline else { return Ok(None) };
    let path = task.bundle_path.join(rel);
    let code = fs::read_to_string(&path)
        .map_err(|e| ExecError::BundleMissing { path: path.clone(), reason: e.to_string() })?;
    Ok(Some(Solution::new("baseline", code, None, None, 0).map_err(|e| ExecError::BundleMissing {
        path,
        reason: e.to_string(),
    })?))
}

fn placeholder(trace: u32) -> Solution {
    Solution { id: format!("t{trace}-empty"), code: String::new(), parent_id: None, hypothesis_id: None, created_at: 0 }
}

struct BudgetState {
    budget: Budget,
    started: Instant,
    last_broadcast: Instant,
}

struct Shared {
    memory: SharedMemory,
    budget: Mutex<BudgetState>,
    abort: AtomicBool,
}

struct Worker {
    state: TraceState,
    next_iteration: u32,
    pending: Option<Candidate>,
    run_timeout: TimeoutState,
    coder_timeout: TimeoutState,
    rng: ChaCha8Rng,
    seen: Vec<String>,
    done: bool,
}

impl Worker {
    fn trace(&self) -> u32 {
        self.state.trace_id
    }

    /// Claims one unit of budget; false once the budget is spent.
    fn try_start(&self, env: &Env<'_>, shared: &Shared) -> bool {
        let mut b = shared.budget.lock().expect("budget lock poisoned");
        if b.budget.mode == BudgetMode::WallClockSeconds {
            b.budget.consumed = b.started.elapsed().as_secs_f64();
            let since = b.last_broadcast.elapsed().as_secs_f64();
            if since >= env.cfg.merge_hours * 3600.0 {
                b.last_broadcast = Instant::now();
                env.recorder.emit(
                    None,
                    u64::from(self.next_iteration),
                    EventBody::Broadcast {
                        elapsed_hours: b.budget.consumed / 3600.0,
                        memory_size: shared.memory.len(),
                    },
                );
            }
        }
        if b.budget.exhausted() {
            return false;
        }
        if b.budget.mode == BudgetMode::IterationCount {
            b.budget.consumed += 1.0;
        }
        true
    }

    fn step(&mut self, env: &Env<'_>, shared: &Shared) -> Result<(), EngineError> {
        if shared.abort.load(Ordering::SeqCst) || !self.try_start(env, shared) {
            self.done = true;
            return Ok(());
        }
        let iteration = self.next_iteration;
        self.next_iteration += 1;
        let candidate = match self.pending.take() {
            Some(c) => c,
            None => self.reason(env, shared, iteration)?,
        };
        let best = self.state.best_solution.clone();
        let evaluated = env.evaluate(self.trace(), iteration, candidate, (&best, self.state.best_score), &mut self.run_timeout)?;
        self.commit(env, shared, evaluated)?;
        self.maybe_extend(env, shared, iteration);
        Ok(())
    }

    fn commit(&mut self, env: &Env<'_>, shared: &Shared, ev: Evaluated) -> Result<(), EngineError> {
        let Evaluated { record, solution } = ev;
        if record.decision {
            let embedding = env.oracle.embed(&record.hypothesis.text)?;
            let trace = self.trace();
            let time = u64::from(record.iteration);
            shared.memory.commit_with(&record, embedding, |entry| {
                env.emit(trace, time, EventBody::MemoryCommit { entry: entry.clone() });
            });
        }
        self.state.record(record, &solution, env.task.direction);
        Ok(())
    }

    fn maybe_extend(&self, env: &Env<'_>, shared: &Shared, iteration: u32) {
        let policy = ExtensionPolicy::from(env.cfg);
        let mut b = shared.budget.lock().expect("budget lock poisoned");
        if !extension_due(&b.budget, &policy) {
            return;
        }
        let evidence = BudgetEvidence {
            exit_statuses: self.state.history.iter().rev().take(5).map(|r| r.feedback.trace.exit_status).collect(),
            best_curve: self.state.history.iter().map(|r| r.feedback.perf.best).collect(),
        };
        let before = b.budget.clone();
        let after = adjust_budget(&before, &evidence, env.oracle, &policy);
        // One consultation per available extension slot.
        let mut recorded = after.clone();
        if recorded.extensions_granted == before.extensions_granted {
            recorded.extensions_granted += 1;
            recorded.total = before.total;
        }
        let reason = if after.total > before.total { "extension granted" } else { "extension declined" };
        env.emit(self.trace(), u64::from(iteration), EventBody::BudgetChange { before, after: recorded.clone(), reason: reason.into() });
        b.budget = recorded;
    }

    fn reason(&mut self, env: &Env<'_>, shared: &Shared, iteration: u32) -> Result<Candidate, EngineError> {
        let cfg = env.cfg;
        let trace = self.trace();
        let memory = shared.memory.snapshot();
        let visible = if !cfg.enable_global_memory {
            SuccessMemory::new()
        } else if !cfg.enable_cross_trace_sharing {
            memory.filtered(|e| e.trace_id == trace)
        } else {
            memory
        };
        let lambda = adaptive_lambda(self.state.n_succ, self.state.n_fail);
        let ctx = ReasoningContext {
            task: env.task,
            best: &self.state.best_solution,
            feedback: self.state.history.last().map(|r| &r.feedback),
            history: &self.state.history,
        };
        let challenges = extract_challenges(lambda, &ctx, cfg.challenges_per_source, env.oracle)?;
        let opts = HypothesisOptions { unique: cfg.unique_hypothesis, simple: cfg.simple_hypothesis, reprompts: 1 };
        let mut local = Vec::new();
        let mut warnings = Vec::new();
        let mut seen = self.seen.clone();
        for (k, ch) in challenges.iter().enumerate() {
            match generate_hypothesis(format!("t{trace}-i{iteration}-h{}", k + 1), ch, &ctx, &seen, &opts, env.oracle) {
                Ok(g) => {
                    warnings.extend(g.warning);
                    seen.push(g.hypothesis.text.clone());
                    local.push(g.hypothesis);
                }
                Err(ReasoningError::DuplicateHypothesis(text)) => warnings.push(format!("dropped duplicate hypothesis: {text}")),
                Err(e) => return Err(e.into()),
            }
        }
        for w in &warnings {
            log::warn!("trace {trace} iteration {iteration}: {w}");
        }
        let local = if local.is_empty() {
            local
        } else {
            prioritize(local, &memory_digest(&visible, 5), &cfg.scoring_weights, env.task, env.oracle)?
        };
        let new_id = format!("t{trace}-i{iteration}-sel");
        let (chosen, pool) = if cfg.llm_select_hypothesis {
            let anchor = self.state.history.last().map(|r| r.hypothesis.text.clone()).or_else(|| local.first().map(|h| h.text.clone()));
            let embedding = anchor.map(|t| env.oracle.embed(&t)).transpose()?;
            let query = PoolQuery {
                embedding: embedding.as_deref(),
                kernel: cfg.kernel()?,
                iteration,
                h_star: self.state.best_score,
                direction: env.task.direction,
            };
            let pool = build_candidate_pool(&local, &visible, &query, &mut self.rng)?;
            let chosen = cross_trace_select(&pool, &visible, self.state.best_score, &new_id, env.oracle)?;
            (chosen, pool)
        } else if !local.is_empty() {
            (select_topk_sample(&local, cfg.topk_sample, &mut self.rng)?, local.clone())
        } else {
            return Err(SelectionError::EmptyCandidateSet.into());
        };
        env.emit(
            trace,
            u64::from(iteration),
            EventBody::HypothesisChosen {
                iteration,
                hypothesis: chosen.clone(),
                lambda: Some(lambda),
                pool: pool.iter().map(|h| PoolEntry { id: h.id.clone(), text: h.text.clone(), origin: h.origin }).collect(),
                warnings,
            },
        );
        self.seen.push(chosen.text.clone());
        let solution_id = format!("t{trace}-i{iteration}");
        let result = implement(
            solution_id.clone(),
            &chosen,
            Some(&self.state.best_solution),
            env.task,
            env.oracle,
            env.executor,
            &mut self.coder_timeout,
            cfg.max_fix_iters,
            cfg.exec_seed(iteration),
        );
        Ok(Candidate::from_implement(chosen, &solution_id, result)?)
    }
}

/// Phase 1 for every trace: diversified hypotheses and their first
/// implementations. Consumes no budget.
fn initialise(env: &Env<'_>, cfg: &RunConfig) -> Result<Vec<Worker>, EngineError> {
    let hyps = init_diversified(env.task, cfg.max_trace_num, env.oracle, cfg.cross_trace_diversity)?;
    let baseline = baseline_solution(env.task)?;
    let build = |(i, hyp): (usize, &Hypothesis)| -> Result<(Candidate, TimeoutState), ReasoningError> {
        let trace = i as u32 + 1;
        let mut coder = cfg.coder_timeout();
        let id = format!("t{trace}-i0");
        let result = implement(
            id.clone(),
            hyp,
            baseline.as_ref(),
            env.task,
            env.oracle,
            env.executor,
            &mut coder,
            cfg.max_fix_iters,
            cfg.exec_seed(0),
        );
        Ok((Candidate::from_implement(hyp.clone(), &id, result)?, coder))
    };
    let built: Vec<Result<(Candidate, TimeoutState), ReasoningError>> = if cfg.deterministic {
        hyps.iter().enumerate().map(build).collect()
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = hyps.iter().enumerate().map(|item| s.spawn(move || build(item))).collect();
            handles.into_iter().map(|h| h.join().expect("init worker panicked")).collect()
        })
    };
    let mut workers = Vec::with_capacity(hyps.len());
    for (i, (hyp, res)) in hyps.iter().zip(built).enumerate() {
        let trace = i as u32 + 1;
        let (candidate, coder_timeout) = res?;
        let initial_best = baseline.clone().unwrap_or_else(|| placeholder(trace));
        env.emit(
            trace,
            0,
            EventBody::Init {
                hypothesis: hyp.clone(),
                priors: if cfg.cross_trace_diversity { i } else { 0 },
                candidate: candidate.solution().cloned(),
                initial_best: initial_best.clone(),
            },
        );
        workers.push(Worker {
            state: TraceState::new(trace, initial_best),
            next_iteration: 1,
            pending: Some(candidate),
            run_timeout: cfg.run_timeout(),
            coder_timeout,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(trace) << 32)),
            seen: vec![hyp.text.clone()],
            done: false,
        });
    }
    Ok(workers)
}

fn optimise(env: &Env<'_>, shared: &Shared, workers: &mut [Worker]) -> Result<(), EngineError> {
    if env.cfg.deterministic {
        loop {
            let mut progressed = false;
            for w in workers.iter_mut().filter(|w| !w.done) {
                w.step(env, shared)?;
                progressed = true;
            }
            if !progressed {
                return Ok(());
            }
        }
    }
    let errors: Vec<EngineError> = thread::scope(|s| {
        let handles: Vec<_> = workers
            .iter_mut()
            .map(|w| {
                s.spawn(move || {
                    while !w.done {
                        if let Err(e) = w.step(env, shared) {
                            shared.abort.store(true, Ordering::SeqCst);
                            return Some(e);
                        }
                    }
                    None
                })
            })
            .collect();
        handles.into_iter().filter_map(|h| h.join().expect("trace worker panicked")).collect()
    });
    match errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn trace_bests(workers: &[Worker]) -> Vec<TraceBest> {
    workers
        .iter()
        .filter_map(|w| {
            w.state.best_score.map(|score| TraceBest { trace_id: w.trace(), solution: w.state.best_solution.clone(), score })
        })
        .collect()
}

/// Runs all three phases. Failures stop the run but still produce a
/// report and a final record.
pub fn run(task: &Task, cfg: &RunConfig, oracle: &Oracle, executor: &Executor, recorder: &Recorder) -> RunOutcome {
    let env = Env { task, cfg, oracle, executor, recorder };
    let now = Instant::now();
    let shared = Shared {
        memory: SharedMemory::new(),
        budget: Mutex::new(BudgetState { budget: cfg.budget(), started: now, last_broadcast: now }),
        abort: AtomicBool::new(false),
    };

    let mut error: Option<EngineError> = None;
    let mut workers = match initialise(&env, cfg) {
        Ok(w) => w,
        Err(e) => {
            error = Some(e);
            Vec::new()
        }
    };
    if error.is_none() {
        if let Err(e) = optimise(&env, &shared, &mut workers) {
            error = Some(e);
        }
    }

    let budget = shared.budget.lock().expect("budget lock poisoned").budget.clone();
    let final_time = workers.iter().map(|w| u64::from(w.next_iteration)).max().unwrap_or(0);
    let cands = trace_bests(&workers);
    let mut choice: Option<FinalChoice> = None;
    if !cands.is_empty() {
        if error.is_none() && cfg.enable_multi_seed_selection {
            match final_select(&cands, cfg.topk_final, &cfg.final_seeds, executor, task.direction, &cfg.run_timeout()) {
                Ok(c) => choice = Some(c),
                Err(e) => error = Some(e.into()),
            }
        }
        if choice.is_none() {
            let i = rank_by_validation(&cands, 1, task.direction)[0];
            let c = &cands[i];
            choice = Some(FinalChoice { trace_id: c.trace_id, solution: c.solution.clone(), validation_score: c.score, seeds: None });
        }
    }
    let (best, best_trace) = match &choice {
        Some(c) => (Some(c.solution.clone()), Some(c.trace_id)),
        None => {
            let first = workers.first();
            let fallback = first.and_then(|w| w.pending.as_ref().and_then(Candidate::solution).cloned().or(Some(w.state.best_solution.clone())));
            (fallback, None)
        }
    };
    let error_text = error.as_ref().map(ToString::to_string);
    let fin = FinalInfo {
        trace_id: choice.as_ref().map(|c| c.trace_id),
        solution_id: choice.as_ref().map(|c| c.solution.id.clone()),
        validation_score: choice.as_ref().map(|c| c.validation_score),
        mean: choice.as_ref().and_then(|c| c.seeds.as_ref().map(|s| s.mean)),
        budget: budget.clone(),
        partial: error.is_some(),
        error: error_text.clone(),
    };
    recorder.emit(
        None,
        final_time,
        EventBody::Final {
            trace_id: fin.trace_id,
            solution: choice.as_ref().map(|c| c.solution.clone()),
            validation_score: fin.validation_score,
            seed_scores: choice.as_ref().and_then(|c| c.seeds.as_ref().map(|s| s.scores.clone())).unwrap_or_default(),
            mean: fin.mean,
            budget: budget.clone(),
            partial: fin.partial,
            error: error_text,
        },
    );
    let traces: Vec<TraceState> = workers.into_iter().map(|w| w.state).collect();
    let memory = shared.memory.snapshot();
    let header = log_header(task, cfg);
    let report = RunReport::from_state(&header, &traces, &memory, None, &fin, &[]);
    RunOutcome { best, best_trace, report, traces, memory, budget, error }
}
