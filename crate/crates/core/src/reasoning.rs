//! Structured reasoning: adaptive weighting, challenge extraction,
//! hypothesis generation, prioritization, top-k sampling and implementation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DomainError, ExecError, ReasoningError};
use crate::executor::{ExecMode, ExecOutcome, Executor, TimeoutState};
use crate::memory::SuccessMemory;
use crate::model::{fmt_score, Component, ExecutionTrace, Hypothesis, IterationRecord, Origin, Solution, StructuredFeedback, Task};
use crate::oracle::{extract_code, Oracle, Role};

pub const DIMENSIONS: [&str; 5] = ["impact", "alignment", "novelty", "feasibility", "risk"];

/// Per-dimension weights for hypothesis prioritization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringWeights {
    pub impact: f64,
    pub alignment: f64,
    pub novelty: f64,
    pub feasibility: f64,
    pub risk: f64,
}

impl Default for ScoringWeights {
    fn default() -> Self {
        Self { impact: 0.4, alignment: 0.2, novelty: 0.2, feasibility: 0.1, risk: 0.1 }
    }
}

impl ScoringWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.impact, self.alignment, self.novelty, self.feasibility, self.risk]
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let w = self.as_array();
        if w.iter().any(|x| !(0.0..=1.0).contains(x)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(DomainError::Invalid(format!("scoring weights {w:?} must lie in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// Weighted total of scores given in [`DIMENSIONS`] order.
    pub fn total(&self, scores: &[f64; 5]) -> f64 {
        self.as_array().iter().zip(scores).map(|(w, s)| w * s).sum()
    }
}

/// `max(0, 3 - floor((3 n_succ + 2 n_fail) / 8))`.
pub fn adaptive_lambda(n_succ: u32, n_fail: u32) -> u32 {
    let experience = (3 * u64::from(n_succ) + 2 * u64::from(n_fail)) / 8;
    3u64.saturating_sub(experience) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeSource {
    Scenario,
    History,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Challenge {
    pub text: String,
    pub source: ChallengeSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSketch {
    pub plan_text: String,
    pub touched_components: Vec<Component>,
}

/// What a trace knows when it reasons about its next step.
#[derive(Debug, Clone, Copy)]
pub struct ReasoningContext<'a> {
    pub task: &'a Task,
    pub best: &'a Solution,
    pub feedback: Option<&'a StructuredFeedback>,
    pub history: &'a [IterationRecord],
}

impl ReasoningContext<'_> {
    fn feedback_text(&self) -> String {
        self.feedback.map(StructuredFeedback::summary).unwrap_or_default()
    }

    fn history_text(&self) -> String {
        self.history
            .iter()
            .map(|r| {
                format!(
                    "#{} [{}] {} -> {} ({})",
                    r.iteration,
                    r.hypothesis.target_component,
                    r.hypothesis.text.lines().next().unwrap_or(""),
                    if r.decision { "accepted" } else { "rejected" },
                    fmt_score(r.feedback.perf.current)
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn parse_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            let l = l.trim();
            let l = l.trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'));
            l.trim().to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

/// Scenario challenges while λ > 0, history challenges while λ < 3.
pub fn extract_challenges(
    lambda: u32,
    ctx: &ReasoningContext<'_>,
    limit: usize,
    oracle: &Oracle,
) -> Result<Vec<Challenge>, ReasoningError> {
    if lambda > 3 {
        return Err(ReasoningError::Invalid(format!("lambda {lambda} outside 0..=3")));
    }
    let mut out = Vec::new();
    let limit_text = limit.to_string();
    let feedback = ctx.feedback_text();
    if lambda > 0 {
        let resp = oracle.ask(
            Role::ExtractChallenges,
            [
                ("source", "scenario"),
                ("task", ctx.task.description.as_str()),
                ("best_code", ctx.best.code.as_str()),
                ("limit", limit_text.as_str()),
            ],
        )?;
        out.extend(
            parse_list(&resp.text).into_iter().take(limit).map(|text| Challenge { text, source: ChallengeSource::Scenario }),
        );
    }
    if lambda < 3 {
        let history = ctx.history_text();
        let resp = oracle.ask(
            Role::ExtractChallenges,
            [
                ("source", "history"),
                ("task", ctx.task.description.as_str()),
                ("feedback", feedback.as_str()),
                ("history", history.as_str()),
                ("limit", limit_text.as_str()),
            ],
        )?;
        out.extend(
            parse_list(&resp.text).into_iter().take(limit).map(|text| Challenge { text, source: ChallengeSource::History }),
        );
    }
    Ok(out)
}

/// Splits a hypothesis response into text and component tag. The tag is
/// either the last line or a trailing `/ Tag` on a single line.
pub fn parse_hypothesis(text: &str) -> (String, Option<Component>) {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() >= 2 {
        let last = lines[lines.len() - 1];
        let tag = last.trim_start_matches("Component:").trim_start_matches("component:").trim();
        if let Some(c) = Component::parse(tag) {
            return (lines[..lines.len() - 1].join("\n"), Some(c));
        }
    }
    let joined = lines.join("\n");
    if let Some((body, tag)) = joined.rsplit_once('/') {
        if let Some(c) = Component::parse(tag.trim()) {
            return (body.trim().to_string(), Some(c));
        }
    }
    (joined, None)
}

pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisOptions {
    pub unique: bool,
    pub simple: bool,
    pub reprompts: u32,
}

impl Default for HypothesisOptions {
    fn default() -> Self {
        Self { unique: true, simple: false, reprompts: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub hypothesis: Hypothesis,
    /// Set when the component tag could not be parsed.
    pub warning: Option<String>,
}

/// One hypothesis for `challenge`. With uniqueness on, a text matching
/// `seen` triggers up to `reprompts` retries before giving up.
pub fn generate_hypothesis(
    id: impl Into<String>,
    challenge: &Challenge,
    ctx: &ReasoningContext<'_>,
    seen: &[String],
    opts: &HypothesisOptions,
    oracle: &Oracle,
) -> Result<Generated, ReasoningError> {
    if challenge.text.trim().is_empty() {
        return Err(ReasoningError::Invalid("challenge text is empty".into()));
    }
    let seen: Vec<String> = seen.iter().map(|s| normalize_text(s)).collect();
    let feedback = ctx.feedback_text();
    let variant = if opts.simple { "simple" } else { "full" };
    let mut avoid = String::new();
    let mut attempt = 0;
    loop {
        let resp = oracle.ask(
            Role::GenerateHypothesis,
            [
                ("challenge", challenge.text.as_str()),
                ("best_code", ctx.best.code.as_str()),
                ("feedback", feedback.as_str()),
                ("task", ctx.task.description.as_str()),
                ("variant", variant),
                ("avoid", avoid.as_str()),
            ],
        )?;
        let (text, component) = parse_hypothesis(&resp.text);
        if text.trim().is_empty() {
            return Err(ReasoningError::Invalid("oracle returned an empty hypothesis".into()));
        }
        if opts.unique && seen.contains(&normalize_text(&text)) {
            if attempt >= opts.reprompts {
                return Err(ReasoningError::DuplicateHypothesis(text));
            }
            attempt += 1;
            avoid = format!("Do not repeat any earlier hypothesis; this one was already tried: {text}");
            continue;
        }
        let warning = component.is_none().then(|| format!("unparsable component tag in `{}`; using Workflow", resp.text.trim()));
        let mut hypothesis =
            Hypothesis::new(id, text, component.unwrap_or(Component::Workflow), challenge.text.clone(), Origin::Local);
        hypothesis.derived_from = None;
        return Ok(Generated { hypothesis, warning });
    }
}

/// Parses a five-dimension JSON score payload in [`DIMENSIONS`] order.
pub fn parse_scores(text: &str) -> Result<[f64; 5], ReasoningError> {
    let body = extract_code(text);
    let start = body.find('{').ok_or_else(|| ReasoningError::ScoreParseError(text.trim().to_string()))?;
    let end = body.rfind('}').ok_or_else(|| ReasoningError::ScoreParseError(text.trim().to_string()))?;
    let value: serde_json::Value = serde_json::from_str(&body[start..=end])
        .map_err(|e| ReasoningError::ScoreParseError(format!("{e}: {}", text.trim())))?;
    let mut out = [0.0; 5];
    for (i, dim) in DIMENSIONS.iter().enumerate() {
        let v = value
            .get(*dim)
            .or_else(|| if *dim == "risk" { value.get("risk_reward") } else { None })
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| ReasoningError::ScoreParseError(format!("missing or non-numeric `{dim}`")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(ReasoningError::ScoreParseError(format!("`{dim}` = {v} outside [0, 1]")));
        }
        out[i] = v;
    }
    Ok(out)
}

/// Short text view of the memory for oracle contexts.
pub fn memory_digest(memory: &SuccessMemory, limit: usize) -> String {
    let mut entries: Vec<_> = memory.entries().iter().collect();
    entries.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    entries
        .into_iter()
        .take(limit)
        .map(|e| format!("[trace {} #{} dh={:+.4}] {}", e.trace_id, e.iteration, e.delta, e.hypothesis.text.lines().next().unwrap_or("")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Scores each hypothesis with one oracle call and sorts by total,
/// descending; equal totals keep their input order.
pub fn prioritize(
    hypotheses: Vec<Hypothesis>,
    memory_text: &str,
    weights: &ScoringWeights,
    task: &Task,
    oracle: &Oracle,
) -> Result<Vec<Hypothesis>, ReasoningError> {
    weights.validate().map_err(|e| ReasoningError::Invalid(e.to_string()))?;
    let mut scored = Vec::with_capacity(hypotheses.len());
    for mut h in hypotheses {
        let component = h.target_component.to_string();
        let resp = oracle.ask(
            Role::ScoreHypothesis,
            [
                ("hypothesis", h.text.as_str()),
                ("component", component.as_str()),
                ("memory", memory_text),
                ("task", task.description.as_str()),
            ],
        )?;
        let s = parse_scores(&resp.text)?;
        h.scores = DIMENSIONS.iter().map(|d| d.to_string()).zip(s).collect();
        h.total_score = weights.total(&s);
        scored.push(h);
    }
    scored.sort_by(|a, b| b.total_score.total_cmp(&a.total_score));
    Ok(scored)
}

/// Uniform draw from the first `min(k, n)` elements.
pub fn select_topk_sample<R: Rng + ?Sized>(
    sorted: &[Hypothesis],
    k: usize,
    rng: &mut R,
) -> Result<Hypothesis, ReasoningError> {
    if k == 0 {
        return Err(ReasoningError::Invalid("k must be at least 1".into()));
    }
    if sorted.is_empty() {
        return Err(ReasoningError::EmptyCandidateSet);
    }
    let m = k.min(sorted.len());
    Ok(sorted[rng.gen_range(0..m)].clone())
}

fn touched_components(plan: &str, fallback: Component) -> Vec<Component> {
    let mut out = Vec::new();
    for word in plan.split(|c: char| !c.is_alphanumeric() && c != '_') {
        if let Some(c) = Component::parse(word) {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    if out.is_empty() {
        out.push(fallback);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Implemented {
    pub solution: Solution,
    pub sketch: SolutionSketch,
    pub dev_outcome: ExecOutcome,
}

/// Sketch, implement and debug a hypothesis on the development subset.
#[allow(clippy::too_many_arguments)]
pub fn implement(
    id: impl Into<String>,
    hypothesis: &Hypothesis,
    base: Option<&Solution>,
    task: &Task,
    oracle: &Oracle,
    executor: &Executor,
    timeout: &mut TimeoutState,
    max_fix_iters: u32,
    seed: u64,
) -> Result<Implemented, ReasoningError> {
    let base_code = base.map(|b| b.code.as_str()).unwrap_or("");
    let sketch_resp = oracle.ask(
        Role::Sketch,
        [("hypothesis", hypothesis.text.as_str()), ("base_code", base_code), ("task", task.description.as_str())],
    )?;
    let plan = sketch_resp.text.trim().to_string();
    let sketch = SolutionSketch {
        touched_components: touched_components(&plan, hypothesis.target_component),
        plan_text: if plan.is_empty() { hypothesis.text.clone() } else { plan },
    };
    let code_resp = oracle.ask(
        Role::Implement,
        [
            ("hypothesis", hypothesis.text.as_str()),
            ("sketch", sketch.plan_text.as_str()),
            ("base_code", base_code),
            ("task", task.description.as_str()),
        ],
    )?;
    let code = extract_code(&code_resp.text);
    let solution = Solution::new(id, code, base.map(|b| b.id.clone()), Some(hypothesis.id.clone()), 0).map_err(|e| {
        ReasoningError::ImplementationFailed {
            reason: e.to_string(),
            trace: Box::new(ExecutionTrace::not_run("oracle returned empty code")),
            code: None,
        }
    })?;
    let mode = ExecMode::dev(seed);
    match executor.debug_loop(oracle, solution, base.map(|b| b.code.as_str()), mode, timeout, max_fix_iters) {
        Ok((solution, dev_outcome)) => Ok(Implemented { solution, sketch, dev_outcome }),
        Err(ExecError::DebugExhausted { attempts, last, code }) => Err(ReasoningError::ImplementationFailed {
            reason: format!("still failing after {attempts} fix attempt(s)"),
            trace: last,
            code: Some(code),
        }),
        Err(e) => Err(e.into()),
    }
}
