#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use engine_core::error::OracleError;
use engine_core::executor::{load_task, Executor};
use engine_core::multitrace::RunConfig;
use engine_core::oracle::{Backend, Oracle, OracleRequest, OracleResponse, RetryPolicy, Role};
use engine_core::persistence::{LogHeader, Recorder};
use engine_core::model::Task;

pub fn toy_bundle() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy_bundle")
}

pub fn toy_task() -> Task {
    load_task(&toy_bundle()).unwrap()
}

pub fn executor(task: &Task, work: &Path, cfg: &RunConfig) -> Executor {
    let mut ex = Executor::new(task.clone(), work, cfg.permits()).unwrap();
    ex.set_deterministic(cfg.deterministic);
    ex
}

/// Base config for small deterministic runs on the toy bundle.
pub fn small_config(traces: u32, iterations: u64) -> RunConfig {
    RunConfig {
        max_trace_num: traces,
        budget_iterations: iterations,
        deterministic: true,
        llm_decide_longer_runtime: false,
        challenges_per_source: 2,
        final_seeds: vec![0, 1],
        retry_wait_seconds: 0.0,
        max_retry: 0,
        ..RunConfig::default()
    }
}

/// Backend answering from a closure; used to build controlled runs.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&OracleRequest) -> String + Send + Sync,
{
    fn complete(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        Ok(OracleResponse::text((self.0)(request)))
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "fn"
    }
}

pub fn fn_oracle<F>(f: F) -> Oracle
where
    F: Fn(&OracleRequest) -> String + Send + Sync + 'static,
{
    Oracle::new(Arc::new(FnBackend(f)), RetryPolicy { max_retry: 0, wait_seconds: 0.0 })
}

/// Reasonable answers for every role, with revision markers in code so the
/// toy bundle's score changes from candidate to candidate.
pub fn default_answer(req: &OracleRequest, counter: &std::sync::atomic::AtomicU64) -> String {
    use std::sync::atomic::Ordering;
    let n = counter.fetch_add(1, Ordering::SeqCst) + 1;
    match req.role {
        Role::InitHypothesis => format!("initial direction {}\nModel", req.get("index").unwrap_or("?")),
        Role::ExtractChallenges => format!("1. challenge {n}a\n2. challenge {n}b"),
        Role::GenerateHypothesis => format!("hypothesis {n} for {}\nFeatureEng", req.get("challenge").unwrap_or("")),
        Role::ScoreHypothesis => {
            r#"{"impact":0.5,"alignment":0.5,"novelty":0.5,"feasibility":0.5,"risk_reward":0.5}"#.to_string()
        }
        Role::SelectHypothesis => "Select #1".into(),
        Role::Sketch => "plan: edit the script".into(),
        Role::Implement => {
            let base = req.get("base_code").unwrap_or("");
            let base = if base.trim().is_empty() { include_str!("../fixtures/toy_bundle/baseline.sh") } else { base };
            format!("{}\n# revision {n}\n", base.trim_end())
        }
        Role::DebugFix => req.get("code").unwrap_or("").to_string(),
        Role::AlignmentCheck => "no issues found".into(),
        Role::ComprehensiveAnalysis => match req.get("aspect") {
            Some("code_quality") => "no concerns".into(),
            _ => "VERIFIED: consistent".into(),
        },
        Role::Judge => {
            let cur: Option<f64> = req.get("current_score").and_then(|v| v.parse().ok());
            let best: Option<f64> = req.get("best_score").and_then(|v| v.parse().ok());
            match (cur, best) {
                (Some(c), Some(b)) if c <= b => "REJECT".into(),
                (Some(_), _) => "ACCEPT".into(),
                _ => "REJECT".into(),
            }
        }
        Role::BudgetDecision => "no".into(),
        Role::Embed => String::new(),
    }
}

/// Runs the multi-trace engine with a file-backed log and returns the
/// outcome and the log text.
pub fn run_to_log(
    task: &Task,
    cfg: &RunConfig,
    oracle: &Oracle,
    dir: &Path,
) -> (engine_core::multitrace::RunOutcome, String) {
    let work = dir.join("work");
    fs::create_dir_all(&work).unwrap();
    let log = dir.join("events.jsonl");
    let header: LogHeader = engine_core::multitrace::log_header(task, cfg);
    let recorder = Recorder::to_file(&log, &header).unwrap();
    let ex = executor(task, &work, cfg);
    let out = engine_core::multitrace::run(task, cfg, oracle, &ex, &recorder);
    recorder.finish().unwrap();
    (out, fs::read_to_string(&log).unwrap())
}

pub fn mcts_to_log(task: &Task, cfg: &RunConfig, oracle: &Oracle, dir: &Path) -> (engine_core::mcts::MctsOutcome, String) {
    let work = dir.join("work");
    fs::create_dir_all(&work).unwrap();
    let log = dir.join("events.jsonl");
    let recorder = Recorder::to_file(&log, &engine_core::mcts::mcts_header(task, cfg)).unwrap();
    let ex = executor(task, &work, cfg);
    let out = engine_core::mcts::mcts_run(task, cfg, oracle, &ex, &recorder);
    recorder.finish().unwrap();
    (out, fs::read_to_string(&log).unwrap())
}
