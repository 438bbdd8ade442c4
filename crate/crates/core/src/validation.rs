//! Hierarchical validation: format, alignment and comprehensive gates
//! followed by a judge decision. A failed gate is a hard veto.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, OracleError};
use crate::model::{
    fmt_score, is_improvement, score_delta, DiagnosticReason, Direction, ExecutionTrace, ExitStatus, Gate,
    Hypothesis, PerfPair, StructuredFeedback, SubmissionSchema, Task,
};
use crate::oracle::{Oracle, Role, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub gate: Gate,
    pub passed: bool,
    pub reason_text: String,
    pub findings: Vec<String>,
}

impl GateOutcome {
    fn pass(gate: Gate, reason: impl Into<String>) -> Self {
        Self { gate, passed: true, reason_text: reason.into(), findings: Vec::new() }
    }

    fn fail(gate: Gate, reason: impl Into<String>) -> Self {
        Self { gate, passed: false, reason_text: reason.into(), findings: Vec::new() }
    }
}

impl fmt::Display for GateOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.gate, if self.passed { "pass" } else { "fail" }, self.reason_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    #[default]
    Hierarchical,
    /// Baseline that accepts iff the validation score improved; no oracle calls.
    ScoreOnly,
}

/// Everything the gates look at for one iteration.
#[derive(Debug, Clone)]
pub struct ValidationInput<'a> {
    pub task: &'a Task,
    pub hypothesis: &'a Hypothesis,
    pub code: &'a str,
    pub best_code: &'a str,
    pub perf: PerfPair,
    pub trace: &'a ExecutionTrace,
    pub submission: Option<&'a Path>,
    pub tolerance: f64,
}

impl ValidationInput<'_> {
    fn direction(&self) -> Direction {
        self.task.direction
    }

    /// Δ against the incumbent; zero when there is no incumbent yet.
    pub fn delta(&self) -> Option<f64> {
        match self.perf.best {
            None => self.perf.current.map(|_| 0.0),
            Some(_) => score_delta(self.perf.current, self.perf.best, self.direction()),
        }
    }

    pub fn improving(&self) -> bool {
        match (self.perf.current, self.perf.best) {
            (Some(_), None) => true,
            _ => self.delta().is_some_and(|d| is_improvement(d, self.tolerance)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub decision: bool,
    pub reason: DiagnosticReason,
    pub gates: Vec<GateOutcome>,
}

fn check_value(domain: &str, value: &str) -> bool {
    let v = value.trim();
    match domain.trim() {
        "float" => v.parse::<f64>().is_ok_and(f64::is_finite),
        "int" => v.parse::<i64>().is_ok(),
        "probability" => v.parse::<f64>().is_ok_and(|x| (0.0..=1.0).contains(&x)),
        "string" => true,
        other => match other.strip_prefix("one_of:") {
            Some(list) => list.split('|').any(|opt| opt == v),
            None => true,
        },
    }
}

/// Rule-based schema check of the submission file.
pub fn check_submission(path: Option<&Path>, schema: &SubmissionSchema) -> GateOutcome {
    let Some(path) = path.filter(|p| p.is_file()) else {
        return GateOutcome::fail(Gate::Format, "submission absent");
    };
    let mut reader = match csv::ReaderBuilder::new().has_headers(true).from_path(path) {
        Ok(r) => r,
        Err(e) => return GateOutcome::fail(Gate::Format, format!("submission unreadable: {e}")),
    };
    let header: Vec<String> = match reader.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(e) => return GateOutcome::fail(Gate::Format, format!("submission header unreadable: {e}")),
    };
    if !schema.columns.is_empty() && header != schema.columns {
        return GateOutcome::fail(
            Gate::Format,
            format!("columns {:?} do not match expected {:?}", header, schema.columns),
        );
    }
    let mut rows = 0usize;
    for (i, rec) in reader.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => return GateOutcome::fail(Gate::Format, format!("row {} malformed: {e}", i + 1)),
        };
        for (col, value) in header.iter().zip(rec.iter()) {
            if let Some(domain) = schema.domains.get(col) {
                if !check_value(domain, value) {
                    return GateOutcome::fail(
                        Gate::Format,
                        format!("row {} column `{col}` value `{value}` is not {domain}", i + 1),
                    );
                }
            }
        }
        rows += 1;
    }
    if let Some(expected) = schema.rows {
        if rows != expected {
            return GateOutcome::fail(Gate::Format, format!("row count {rows} does not match expected {expected}"));
        }
    }
    GateOutcome::pass(Gate::Format, format!("{rows} row(s) match the submission schema"))
}

/// Gate 1: the run completed, the submission matches the schema and the
/// grader produced a score.
pub fn check_format(input: &ValidationInput<'_>) -> GateOutcome {
    if input.trace.exit_status != ExitStatus::Ok {
        return GateOutcome::fail(Gate::Format, format!("run did not complete ({})", input.trace.exit_status));
    }
    let outcome = check_submission(input.submission, &input.task.submission);
    if !outcome.passed {
        return outcome;
    }
    if input.perf.current.is_none() {
        return GateOutcome::fail(Gate::Format, "grader produced no score");
    }
    outcome
}

/// Findings in an alignment response; empty means no issues.
pub fn parse_findings(text: &str) -> Vec<String> {
    let t = text.trim().to_lowercase();
    let clean = ["no issues", "no issue", "none", "pass", "ok", "no findings", "no leakage"];
    if t.is_empty() || clean.iter().any(|c| t == *c || t.starts_with(&format!("{c}.")) || t.starts_with(&format!("{c} ")))
    {
        return Vec::new();
    }
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let l = l.strip_prefix("FINDING:").or_else(|| l.strip_prefix("Finding:")).unwrap_or(l);
            l.trim_start_matches(['-', '*', ' ']).trim().to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

/// Gate 2: oracle review for leakage and metric misalignment.
pub fn check_alignment(code: &str, task: &Task, oracle: &Oracle) -> Result<GateOutcome, OracleError> {
    let resp = oracle.ask(Role::AlignmentCheck, [("code", code), ("task", task.description.as_str())])?;
    let findings = parse_findings(&resp.text);
    let mut outcome = if findings.is_empty() {
        GateOutcome::pass(Gate::Alignment, resp.text.trim())
    } else {
        GateOutcome::fail(Gate::Alignment, resp.text.trim())
    };
    outcome.findings = findings;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HypothesisVerdict {
    Verified,
    Refuted,
    Inconclusive,
}

/// Earliest verdict keyword in the text wins.
pub fn parse_verdict(text: &str) -> HypothesisVerdict {
    let upper = text.to_uppercase();
    let keys = [
        ("REFUTED", HypothesisVerdict::Refuted),
        ("VERIFIED", HypothesisVerdict::Verified),
        ("CONFIRMED", HypothesisVerdict::Verified),
        ("SUPPORTED", HypothesisVerdict::Verified),
        ("INCONCLUSIVE", HypothesisVerdict::Inconclusive),
    ];
    keys.iter()
        .filter_map(|(k, v)| upper.find(k).map(|pos| (pos, *v)))
        .min_by_key(|(pos, _)| *pos)
        .map(|(_, v)| v)
        .unwrap_or(HypothesisVerdict::Inconclusive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comprehensive {
    pub outcome: GateOutcome,
    pub verdict: HypothesisVerdict,
    pub quality_notes: Option<String>,
}

/// Gate 3: did the hypothesis achieve its intended effect. The code-quality
/// sub-analysis runs only when the score is an improvement and the
/// hypothesis was not refuted.
pub fn comprehensive_analysis(input: &ValidationInput<'_>, oracle: &Oracle) -> Result<Comprehensive, OracleError> {
    let current = fmt_score(input.perf.current);
    let best = fmt_score(input.perf.best);
    let direction = input.direction().to_string();
    let logs = format!("{}\n{}", input.trace.runtime_log, input.trace.stdout_excerpt);
    let resp = oracle.ask(
        Role::ComprehensiveAnalysis,
        [
            ("aspect", "hypothesis"),
            ("hypothesis", input.hypothesis.text.as_str()),
            ("diff", input.trace.code_diff.as_str()),
            ("current_score", current.as_str()),
            ("best_score", best.as_str()),
            ("direction", direction.as_str()),
            ("logs", logs.as_str()),
        ],
    )?;
    let verdict = parse_verdict(&resp.text);
    if verdict == HypothesisVerdict::Refuted {
        return Ok(Comprehensive {
            outcome: GateOutcome::fail(Gate::Comprehensive, resp.text.trim()),
            verdict,
            quality_notes: None,
        });
    }
    let quality_notes = if input.improving() {
        let q = oracle.ask(
            Role::ComprehensiveAnalysis,
            [("aspect", "code_quality"), ("code", input.code), ("best_code", input.best_code), ("diff", &input.trace.code_diff)],
        )?;
        Some(q.text.trim().to_string())
    } else {
        None
    };
    Ok(Comprehensive { outcome: GateOutcome::pass(Gate::Comprehensive, resp.text.trim()), verdict, quality_notes })
}

/// `Some(true)` for ACCEPT, `Some(false)` for REJECT, `None` otherwise.
pub fn parse_judge(text: &str) -> Option<bool> {
    let first = text.split_whitespace().next()?;
    let token: String = first.chars().filter(|c| c.is_ascii_alphabetic()).collect::<String>().to_uppercase();
    match token.as_str() {
        "ACCEPT" => Some(true),
        "REJECT" => Some(false),
        _ => None,
    }
}

fn reject_at(gate_outcome: &GateOutcome, gates: Vec<GateOutcome>) -> Validation {
    let mut reason = DiagnosticReason::new(gate_outcome.gate, gate_outcome.reason_text.clone());
    if gate_outcome.gate == Gate::Alignment {
        reason.leakage_findings = gate_outcome.findings.clone();
    }
    Validation { decision: false, reason, gates }
}

/// Runs the gates in order and, if all pass, asks the judge.
pub fn validate(input: &ValidationInput<'_>, oracle: &Oracle, mode: ValidationMode) -> Result<Validation, OracleError> {
    if mode == ValidationMode::ScoreOnly {
        return Ok(score_only(input));
    }
    let mut gates = Vec::new();

    let format = check_format(input);
    gates.push(format.clone());
    if !format.passed {
        return Ok(reject_at(&format, gates));
    }

    let alignment = check_alignment(input.code, input.task, oracle)?;
    gates.push(alignment.clone());
    if !alignment.passed {
        return Ok(reject_at(&alignment, gates));
    }

    let comp = comprehensive_analysis(input, oracle)?;
    gates.push(comp.outcome.clone());
    if !comp.outcome.passed {
        let mut v = reject_at(&comp.outcome, gates);
        v.reason.hypothesis_verified = Some(false);
        return Ok(v);
    }

    let feedback = StructuredFeedback {
        perf: input.perf,
        trace: input.trace.clone(),
        reason: DiagnosticReason::new(Gate::Comprehensive, comp.outcome.reason_text.clone()),
    };
    let mut gate_text = gates.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n");
    if let Some(notes) = &comp.quality_notes {
        gate_text.push_str(&format!("\ncode quality: {notes}"));
    }
    let current = fmt_score(input.perf.current);
    let best = fmt_score(input.perf.best);
    let direction = input.direction().to_string();
    let resp = oracle.ask(
        Role::Judge,
        [
            ("feedback", feedback.summary().as_str()),
            ("gates", gate_text.as_str()),
            ("current_score", current.as_str()),
            ("best_score", best.as_str()),
            ("direction", direction.as_str()),
            ("hypothesis", input.hypothesis.text.as_str()),
        ],
    )?;
    let parsed = parse_judge(&resp.text);
    if parsed.is_none() {
        log::warn!("unparsable judge verdict treated as reject: {}", resp.text.trim());
    }
    let mut reason = DiagnosticReason::new(Gate::Judge, resp.text.trim());
    reason.hypothesis_verified = match comp.verdict {
        HypothesisVerdict::Verified => Some(true),
        HypothesisVerdict::Refuted => Some(false),
        HypothesisVerdict::Inconclusive => None,
    };
    reason.code_quality_notes = comp.quality_notes;
    Ok(Validation { decision: parsed.unwrap_or(false), reason, gates })
}

fn score_only(input: &ValidationInput<'_>) -> Validation {
    let delta = match (input.perf.current, input.perf.best) {
        (Some(_), None) => Some(f64::INFINITY),
        _ => score_delta(input.perf.current, input.perf.best, input.direction()),
    };
    let decision = delta.is_some_and(|d| d > 0.0);
    let text = format!(
        "score-only: current {} vs best {} -> {}",
        fmt_score(input.perf.current),
        fmt_score(input.perf.best),
        if decision { "accept" } else { "reject" }
    );
    Validation { decision, reason: DiagnosticReason::new(Gate::Judge, text), gates: Vec::new() }
}

/// A recorded validation scenario with a known decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureCase {
    pub case_id: String,
    pub component: String,
    pub val_delta_pct: f64,
    pub test_delta_pct: f64,
    pub h_best: f64,
    pub h_current: f64,
    pub hypothesis: String,
    pub code: String,
    pub best_code: String,
    pub transcripts: Vec<TranscriptEntry>,
    pub expected_decision: bool,
    pub expected_gate: Gate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub role: Role,
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixturePack {
    pub task_id: String,
    pub metric_name: String,
    pub direction: Direction,
    pub submission: SubmissionSchema,
    pub cases: Vec<FixtureCase>,
}

impl FixturePack {
    pub fn load(path: &Path) -> Result<Self, DomainError> {
        let text = fs::read_to_string(path).map_err(|e| DomainError::Invalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| DomainError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn task(&self) -> Task {
        Task {
            id: self.task_id.clone(),
            description: format!("{} ({})", self.task_id, self.metric_name),
            metric_name: self.metric_name.clone(),
            direction: self.direction,
            bundle_path: PathBuf::new(),
            dev_fraction: 1.0,
            time_limit_dev: 1.0,
            time_limit_full: 1.0,
            runner: vec!["python3".into()],
            solution_file: "solution.py".into(),
            baseline: None,
            submission: self.submission.clone(),
        }
    }

    /// A submission that satisfies the pack's schema.
    pub fn write_submission(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join("submission.csv");
        let rows = self.submission.rows.unwrap_or(1);
        let mut text = self.submission.columns.join(",");
        text.push('\n');
        for i in 0..rows {
            let cells: Vec<String> = self
                .submission
                .columns
                .iter()
                .map(|c| match self.submission.domains.get(c).map(String::as_str) {
                    Some("string") => format!("row_{i}"),
                    Some("int") => i.to_string(),
                    _ => "0.5".to_string(),
                })
                .collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(&path, text)?;
        Ok(path)
    }
}

impl FixtureCase {
    pub fn oracle(&self) -> Oracle {
        let mut backend = ScriptedBackend::new();
        for t in &self.transcripts {
            backend.push(t.role, t.response_text.clone());
        }
        Oracle::scripted(backend)
    }

    pub fn hypothesis(&self) -> Hypothesis {
        let component = crate::model::Component::parse(&self.component).unwrap_or(crate::model::Component::Workflow);
        Hypothesis::new(format!("{}-h", self.case_id), self.hypothesis.clone(), component, "", crate::model::Origin::Local)
    }
}

/// Replays one case through [`validate`], returning the result and the
/// oracle used so callers can inspect the transcript.
pub fn replay_case(
    pack: &FixturePack,
    case: &FixtureCase,
    mode: ValidationMode,
    scratch: &Path,
) -> Result<(Validation, Oracle), OracleError> {
    let task = pack.task();
    let hypothesis = case.hypothesis();
    let submission = pack.write_submission(scratch).map_err(|e| OracleError::Fixture(e.to_string()))?;
    let trace = ExecutionTrace {
        stdout_excerpt: String::new(),
        stderr_excerpt: String::new(),
        runtime_log: format!("replayed case {}", case.case_id),
        code_diff: crate::executor::unified_diff(&case.best_code, &case.code),
        exit_status: ExitStatus::Ok,
        wall_seconds: 0.0,
    };
    let input = ValidationInput {
        task: &task,
        hypothesis: &hypothesis,
        code: &case.code,
        best_code: &case.best_code,
        perf: PerfPair { current: Some(case.h_current), best: Some(case.h_best) },
        trace: &trace,
        submission: Some(&submission),
        tolerance: 0.0,
    };
    let oracle = case.oracle();
    let v = validate(&input, &oracle, mode)?;
    Ok((v, oracle))
}
