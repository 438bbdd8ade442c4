//! Sandboxed execution of candidate solutions against a task bundle.
//!
//! A bundle is a directory holding `task.toml`, `data/dev/`, `data/full/` and
//! an executable `grade`. Solutions run in a fresh jail directory with a
//! scrubbed environment and must write their submission to `OUTPUT_PATH`;
//! the grader is then invoked as `grade <submission> --seed <n>` and must
//! print exactly one `SCORE <decimal>` line.

mod bundle;
mod permits;
mod process;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use bundle::{
    bundle_problems, fingerprint, lint_bundle, load_task, write_dev_subset, DEV_DIR, FULL_DIR, GRADER, TASK_FILE,
};
pub use permits::{Permit, Permits, Semaphore};
pub use process::{run_with_limit, tail_excerpt, ProcOutput};

use crate::error::ExecError;
use crate::model::{ExecutionTrace, ExitStatus, Score, Solution, Task};
use crate::oracle::{extract_code, Oracle, Role};

pub const DEFAULT_EXCERPT_BYTES: usize = 4000;
const CANARY: &str = "canary";
const CANARY_TEXT: &str = "jail canary\n";
const SUBMISSION_FILE: &str = "submission.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecKind {
    DevSubset,
    FullData,
}

impl fmt::Display for ExecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecKind::DevSubset => "dev",
            ExecKind::FullData => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecMode {
    pub kind: ExecKind,
    pub seed: u64,
}

impl ExecMode {
    pub fn dev(seed: u64) -> Self {
        Self { kind: ExecKind::DevSubset, seed }
    }

    pub fn full(seed: u64) -> Self {
        Self { kind: ExecKind::FullData, seed }
    }
}

/// Per-trace timeout escalation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeoutState {
    pub stage: u32,
    pub consecutive_timeouts: u32,
    pub patience: u32,
    pub multiplier_cap: u32,
}

impl Default for TimeoutState {
    fn default() -> Self {
        Self { stage: 1, consecutive_timeouts: 0, patience: 2, multiplier_cap: 4 }
    }
}

impl TimeoutState {
    pub fn new(initial_stage: u32, patience: u32, multiplier_cap: u32) -> Self {
        let cap = multiplier_cap.max(1);
        Self { stage: initial_stage.clamp(1, cap), consecutive_timeouts: 0, patience: patience.max(1), multiplier_cap: cap }
    }

    pub fn multiplier(&self) -> u32 {
        self.stage.min(self.multiplier_cap)
    }

    pub fn escalate(self, outcome: ExitStatus) -> Self {
        let mut next = self;
        if outcome != ExitStatus::Timeout {
            next.consecutive_timeouts = 0;
            return next;
        }
        next.consecutive_timeouts += 1;
        if next.consecutive_timeouts >= next.patience {
            next.stage = (next.stage + 1).min(next.multiplier_cap);
            next.consecutive_timeouts = 0;
        }
        next
    }
}

/// Result of one execution: the score (missing unless the run and the
/// grader both succeeded), the trace, and the saved submission if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub score: Score,
    pub trace: ExecutionTrace,
    pub submission: Option<PathBuf>,
}

impl ExecOutcome {
    pub fn succeeded(&self) -> bool {
        self.trace.exit_status == ExitStatus::Ok && self.submission.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEvalReport {
    pub seeds: Vec<u64>,
    pub scores: Vec<Score>,
    pub mean: f64,
    pub failed: Vec<u64>,
}

/// Parses the grader's stdout; anything but a single `SCORE <finite>` line
/// is an error.
pub fn parse_score_record(stdout: &str) -> Result<f64, ExecError> {
    let lines: Vec<&str> = stdout.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let [line] = lines.as_slice() else {
        return Err(ExecError::GradeParseError(format!("expected one line, got {}", lines.len())));
    };
    let value = line
        .strip_prefix("SCORE ")
        .ok_or_else(|| ExecError::GradeParseError(format!("`{line}` is not a SCORE record")))?;
    let v: f64 = value
        .trim()
        .parse()
        .map_err(|_| ExecError::GradeParseError(format!("`{value}` is not a decimal")))?;
    if !v.is_finite() {
        return Err(ExecError::GradeParseError(format!("non-finite score `{value}`")));
    }
    Ok(v)
}

pub fn unified_diff(old: &str, new: &str) -> String {
    similar::TextDiff::from_lines(old, new).unified_diff().context_radius(3).header("best", "candidate").to_string()
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub struct Executor {
    task: Task,
    work_dir: PathBuf,
    permits: Permits,
    excerpt_bytes: usize,
    counter: AtomicU64,
    deterministic: bool,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor").field("task", &self.task.id).field("work_dir", &self.work_dir).finish()
    }
}

impl Executor {
    /// Checks the bundle layout and prepares `work_dir` for submissions.
    pub fn new(task: Task, work_dir: impl Into<PathBuf>, permits: Permits) -> Result<Self, ExecError> {
        let problems = bundle_problems(&task.bundle_path);
        if !problems.is_empty() {
            return Err(ExecError::BundleMissing { path: task.bundle_path.clone(), reason: problems.join("; ") });
        }
        let work_dir = work_dir.into();
        fs::create_dir_all(work_dir.join("submissions"))?;
        // Runner and grader run from other directories.
        let work_dir = fs::canonicalize(&work_dir)?;
        Ok(Self { task, work_dir, permits, excerpt_bytes: DEFAULT_EXCERPT_BYTES, counter: AtomicU64::new(0), deterministic: false })
    }

    /// Scrubs timings and jail paths from traces so repeated runs compare equal.
    pub fn set_deterministic(&mut self, on: bool) {
        self.deterministic = on;
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn permits(&self) -> &Permits {
        &self.permits
    }

    pub fn work_dir(&self) -> &Path {
        &self.work_dir
    }

    fn data_dir(&self, kind: ExecKind) -> PathBuf {
        self.task.bundle_path.join(match kind {
            ExecKind::DevSubset => DEV_DIR,
            ExecKind::FullData => FULL_DIR,
        })
    }

    fn base_limit(&self, kind: ExecKind) -> f64 {
        match kind {
            ExecKind::DevSubset => self.task.time_limit_dev,
            ExecKind::FullData => self.task.time_limit_full,
        }
    }

    /// Runs `solution` once. `base_code` is the code the diff is taken against.
    pub fn execute(
        &self,
        solution: &Solution,
        base_code: Option<&str>,
        mode: ExecMode,
        timeout: &TimeoutState,
    ) -> Result<ExecOutcome, ExecError> {
        let _permit = self.permits.running.acquire();
        let data_dir = self.data_dir(mode.kind);
        if !data_dir.is_dir() {
            return Err(ExecError::BundleMissing { path: data_dir, reason: "data directory missing".into() });
        }

        let jail = tempfile::Builder::new().prefix("engine-jail-").tempdir()?;
        let scratch = jail.path().join("scratch");
        fs::create_dir(&scratch)?;
        fs::write(jail.path().join(CANARY), CANARY_TEXT)?;
        let script = scratch.join(&self.task.solution_file);
        fs::write(&script, &solution.code)?;
        let output_path = scratch.join(SUBMISSION_FILE);
        let bundle_before = fingerprint(&self.task.bundle_path);

        let limit = self.base_limit(mode.kind) * f64::from(timeout.multiplier());
        let mut cmd = Command::new(&self.task.runner[0]);
        cmd.args(&self.task.runner[1..])
            .arg(&script)
            .current_dir(&scratch)
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()))
            .env("HOME", &scratch)
            .env("TASK_DATA_DIR", &data_dir)
            .env("OUTPUT_PATH", &output_path)
            .env("SEED", mode.seed.to_string());
        let proc = run_with_limit(&mut cmd, Duration::from_secs_f64(limit))
            .map_err(|e| ExecError::SandboxSpawnFailure(format!("{}: {e}", self.task.runner[0])))?;

        let elapsed = if self.deterministic { 0.0 } else { proc.elapsed.as_secs_f64() };
        let mut log = vec![format!(
            "mode={} seed={} limit={limit:.1}s multiplier={} exit={} elapsed={elapsed:.3}s",
            mode.kind,
            mode.seed,
            timeout.multiplier(),
            proc.status,
        )];
        let mut status = proc.status;
        if let Some(code) = proc.code.filter(|c| *c != 0) {
            log.push(format!("exit code {code}"));
        }
        if let Some(sig) = proc.signal {
            log.push(format!("terminated by signal {sig}"));
        }

        if let Some(violation) = jail_violation(jail.path(), &bundle_before, &self.task.bundle_path) {
            log.push(format!("sandbox violation: {violation}"));
            status = ExitStatus::NonzeroExit;
        }

        let mut score = None;
        let mut submission = None;
        if status == ExitStatus::Ok {
            if output_path.is_file() {
                let n = self.counter.fetch_add(1, Ordering::SeqCst);
                let saved = self.work_dir.join("submissions").join(format!(
                    "{}-{}-s{}-{n}.csv",
                    sanitize(&solution.id),
                    mode.kind,
                    mode.seed
                ));
                fs::copy(&output_path, &saved)?;
                match self.grade(&saved, mode)? {
                    Ok(v) => {
                        score = Some(v);
                        log.push(format!("score={v}"));
                    }
                    Err(note) => log.push(note),
                }
                submission = Some(saved);
            } else {
                log.push("no submission written to OUTPUT_PATH".into());
            }
        }

        let scrub = |text: String| {
            if self.deterministic {
                text.replace(&jail.path().display().to_string(), "<jail>")
                    .replace(&self.work_dir.display().to_string(), "<work>")
            } else {
                text
            }
        };
        let trace = ExecutionTrace {
            stdout_excerpt: scrub(tail_excerpt(&proc.stdout, self.excerpt_bytes)),
            stderr_excerpt: scrub(tail_excerpt(&proc.stderr, self.excerpt_bytes)),
            runtime_log: scrub(log.join("\n")),
            code_diff: base_code.map(|b| unified_diff(b, &solution.code)).unwrap_or_default(),
            exit_status: status,
            wall_seconds: elapsed,
        };
        Ok(ExecOutcome { score, trace, submission })
    }

    /// Grades a saved submission. The outer error is a contract violation;
    /// the inner `Err` is a note explaining a missing score.
    fn grade(&self, submission: &Path, mode: ExecMode) -> Result<Result<f64, String>, ExecError> {
        let grader = self.task.bundle_path.join(GRADER);
        let mut cmd = Command::new(&grader);
        cmd.arg(submission)
            .arg("--seed")
            .arg(mode.seed.to_string())
            .current_dir(&self.task.bundle_path)
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()))
            .env("TASK_MODE", mode.kind.to_string())
            .env("TASK_DATA_DIR", self.data_dir(mode.kind));
        let out = run_with_limit(&mut cmd, Duration::from_secs_f64(self.task.time_limit_full))
            .map_err(|e| ExecError::SandboxSpawnFailure(format!("{}: {e}", grader.display())))?;
        if out.status != ExitStatus::Ok {
            return Ok(Err(format!(
                "grader failed ({}): {}",
                out.status,
                tail_excerpt(&out.stderr, 500).trim()
            )));
        }
        parse_score_record(&String::from_utf8_lossy(&out.stdout)).map(Ok)
    }

    /// Executes, and on failure asks the oracle for a corrected program, up
    /// to `max_fix_iters` times. Returns the last solution and its outcome.
    #[allow(clippy::too_many_arguments)]
    pub fn debug_loop(
        &self,
        oracle: &Oracle,
        solution: Solution,
        base_code: Option<&str>,
        mode: ExecMode,
        timeout: &mut TimeoutState,
        max_fix_iters: u32,
    ) -> Result<(Solution, ExecOutcome), ExecError> {
        let _permit = self.permits.debugging.acquire();
        let root_id = solution.id.clone();
        let mut current = solution;
        let mut fixes = 0u32;
        loop {
            let outcome = self.execute(&current, base_code, mode, timeout)?;
            *timeout = timeout.escalate(outcome.trace.exit_status);
            if outcome.succeeded() {
                return Ok((current, outcome));
            }
            if fixes >= max_fix_iters {
                return Err(ExecError::DebugExhausted {
                    attempts: fixes,
                    last: Box::new(outcome.trace),
                    code: current.code,
                });
            }
            fixes += 1;
            let stderr = format!("{}\n{}", outcome.trace.stderr_excerpt, outcome.trace.runtime_log);
            let response = oracle.ask(
                Role::DebugFix,
                [
                    ("code", current.code.clone()),
                    ("stderr", stderr),
                    ("diff", outcome.trace.code_diff.clone()),
                    ("task", self.task.description.clone()),
                    ("attempt", fixes.to_string()),
                ],
            )?;
            let code = extract_code(&response.text);
            current = Solution::new(
                format!("{root_id}.fix{fixes}"),
                code,
                Some(current.id.clone()),
                current.hypothesis_id.clone(),
                current.created_at,
            )
            .map_err(|e| ExecError::Oracle(e.into()))?;
        }
    }

    /// One full-data run per seed; the mean is over the seeds that scored.
    pub fn multi_seed_eval(
        &self,
        solution: &Solution,
        seeds: &[u64],
        timeout: &TimeoutState,
    ) -> Result<SeedEvalReport, ExecError> {
        if seeds.is_empty() {
            return Err(ExecError::BadSeeds("no seeds given".into()));
        }
        let mut sorted = seeds.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(ExecError::BadSeeds(format!("duplicate seeds in {seeds:?}")));
        }
        let mut scores = Vec::with_capacity(seeds.len());
        let mut failed = Vec::new();
        for &seed in seeds {
            let outcome = self.execute(solution, None, ExecMode::full(seed), timeout)?;
            if outcome.score.is_none() {
                failed.push(seed);
            }
            scores.push(outcome.score);
        }
        let ok: Vec<f64> = scores.iter().flatten().copied().collect();
        if ok.is_empty() {
            return Err(ExecError::AllSeedsFailed);
        }
        let mean = ok.iter().sum::<f64>() / ok.len() as f64;
        Ok(SeedEvalReport { seeds: seeds.to_vec(), scores, mean, failed })
    }
}

fn jail_violation(
    jail: &Path,
    bundle_before: &[(PathBuf, u64, Option<std::time::SystemTime>)],
    bundle: &Path,
) -> Option<String> {
    let mut names: Vec<String> = fs::read_dir(jail)
        .map(|rd| rd.flatten().map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    names.sort();
    if names != [CANARY.to_string(), "scratch".to_string()] {
        return Some(format!("jail root now holds {names:?}"));
    }
    if fs::read_to_string(jail.join(CANARY)).ok().as_deref() != Some(CANARY_TEXT) {
        return Some("canary file was modified".into());
    }
    if fingerprint(bundle) != bundle_before {
        return Some("task bundle was modified".into());
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, SubmissionSchema};
    use crate::oracle::ScriptedBackend;
    use std::os::unix::fs::PermissionsExt;

    /// Bundle whose grader reports the first value of the submission's
    /// second line, and fails if the file holds `fail`.
    fn sh_bundle() -> (tempfile::TempDir, Task) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join(DEV_DIR)).unwrap();
        fs::create_dir_all(root.join(FULL_DIR)).unwrap();
        fs::write(root.join(DEV_DIR).join("value"), "dev\n").unwrap();
        fs::write(root.join(FULL_DIR).join("value"), "full\n").unwrap();
        fs::write(
            root.join(TASK_FILE),
            "id = \"sh-demo\"\nmetric_name = \"value\"\ndirection = \"higher_better\"\n\
             dev_fraction = 0.5\ntime_limit_dev = 5.0\ntime_limit_full = 5.0\nrunner = [\"sh\"]\n\
             solution_file = \"solution.sh\"\n",
        )
        .unwrap();
        let grade = root.join(GRADER);
        fs::write(
            &grade,
            "#!/bin/sh\nif grep -q fail \"$1\"; then echo bad >&2; exit 1; fi\n\
             if grep -q garbage \"$1\"; then echo 'score is high'; exit 0; fi\n\
             v=$(sed -n 2p \"$1\" | cut -d, -f1)\necho \"SCORE $v\"\n",
        )
        .unwrap();
        fs::set_permissions(&grade, fs::Permissions::from_mode(0o755)).unwrap();
        let task = load_task(root).unwrap();
        (dir, task)
    }

    fn sol(id: &str, code: &str) -> Solution {
        Solution::new(id, code, None, None, 0).unwrap()
    }

    fn executor(task: Task) -> (tempfile::TempDir, Executor) {
        let work = tempfile::tempdir().unwrap();
        let ex = Executor::new(task, work.path(), Permits::default()).unwrap();
        (work, ex)
    }

    const WRITE_SEED: &str = "printf 'value\\n0.%s\\n' \"$SEED\" > \"$OUTPUT_PATH\"\n";

    #[test]
    fn successful_run_is_graded() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let out = ex.execute(&sol("a", WRITE_SEED), None, ExecMode::full(7), &TimeoutState::default()).unwrap();
        assert_eq!(out.trace.exit_status, ExitStatus::Ok);
        assert_eq!(out.score, Some(0.7));
        assert!(out.submission.unwrap().is_file());
    }

    #[test]
    fn data_dir_follows_mode() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let code = "cat \"$TASK_DATA_DIR/value\"\nprintf 'v\\n1\\n' > \"$OUTPUT_PATH\"\n";
        let dev = ex.execute(&sol("a", code), None, ExecMode::dev(0), &TimeoutState::default()).unwrap();
        let full = ex.execute(&sol("a", code), None, ExecMode::full(0), &TimeoutState::default()).unwrap();
        assert_eq!(dev.trace.stdout_excerpt, "dev\n");
        assert_eq!(full.trace.stdout_excerpt, "full\n");
    }

    #[test]
    fn crash_captures_stderr() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let out = ex
            .execute(&sol("a", "echo 'NameError: x' >&2\nexit 1\n"), None, ExecMode::full(0), &TimeoutState::default())
            .unwrap();
        assert_eq!(out.trace.exit_status, ExitStatus::NonzeroExit);
        assert_eq!(out.score, None);
        assert!(out.trace.stderr_excerpt.contains("NameError"));
    }

    #[test]
    fn infinite_loop_times_out() {
        let (_b, mut task) = sh_bundle();
        task.time_limit_full = 0.5;
        task.time_limit_dev = 0.5;
        let (_w, ex) = executor(task);
        let out =
            ex.execute(&sol("a", "while true; do :; done\n"), None, ExecMode::full(0), &TimeoutState::default()).unwrap();
        assert_eq!(out.trace.exit_status, ExitStatus::Timeout);
        assert_eq!(out.score, None);
    }

    #[test]
    fn grader_failure_means_missing_score() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let out = ex
            .execute(&sol("a", "echo fail > \"$OUTPUT_PATH\"\n"), None, ExecMode::full(0), &TimeoutState::default())
            .unwrap();
        assert_eq!(out.trace.exit_status, ExitStatus::Ok);
        assert_eq!(out.score, None);
        assert!(out.trace.runtime_log.contains("grader failed"));
    }

    #[test]
    fn malformed_grade_output_is_an_error() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let err = ex
            .execute(&sol("a", "echo garbage > \"$OUTPUT_PATH\"\n"), None, ExecMode::full(0), &TimeoutState::default())
            .unwrap_err();
        assert!(matches!(err, ExecError::GradeParseError(_)));
    }

    #[test]
    fn writing_outside_scratch_is_a_violation() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let code = format!("echo x > ../escape.txt\n{WRITE_SEED}");
        let out = ex.execute(&sol("a", &code), None, ExecMode::full(1), &TimeoutState::default()).unwrap();
        assert_eq!(out.trace.exit_status, ExitStatus::NonzeroExit);
        assert!(out.trace.runtime_log.contains("sandbox violation"));
        assert_eq!(out.score, None);
    }

    #[test]
    fn touching_the_bundle_is_a_violation() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let code = format!("echo x >> \"$TASK_DATA_DIR/value\"\n{WRITE_SEED}");
        let out = ex.execute(&sol("a", &code), None, ExecMode::full(1), &TimeoutState::default()).unwrap();
        assert!(out.trace.runtime_log.contains("task bundle was modified"));
    }

    #[test]
    fn environment_is_scrubbed() {
        std::env::set_var("ENGINE_TEST_SECRET", "leak");
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let code = format!("echo \"secret=$ENGINE_TEST_SECRET\"\n{WRITE_SEED}");
        let out = ex.execute(&sol("a", &code), None, ExecMode::full(1), &TimeoutState::default()).unwrap();
        assert_eq!(out.trace.stdout_excerpt, "secret=\n");
    }

    #[test]
    fn diff_is_against_base() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let out = ex
            .execute(&sol("a", WRITE_SEED), Some("echo old\n"), ExecMode::full(1), &TimeoutState::default())
            .unwrap();
        assert!(out.trace.code_diff.contains("-echo old"));
    }

    #[test]
    fn missing_bundle_fails_construction() {
        let dir = tempfile::tempdir().unwrap();
        let task = Task {
            id: "x".into(),
            description: String::new(),
            metric_name: "m".into(),
            direction: Direction::HigherBetter,
            bundle_path: dir.path().to_path_buf(),
            dev_fraction: 0.5,
            time_limit_dev: 1.0,
            time_limit_full: 1.0,
            runner: vec!["sh".into()],
            solution_file: "s.sh".into(),
            baseline: None,
            submission: SubmissionSchema::default(),
        };
        assert!(matches!(Executor::new(task, dir.path(), Permits::default()), Err(ExecError::BundleMissing { .. })));
    }

    #[test]
    fn score_record_parsing() {
        assert_eq!(parse_score_record("SCORE 0.25\n").unwrap(), 0.25);
        assert_eq!(parse_score_record("\n  SCORE -3e-2  \n\n").unwrap(), -0.03);
        assert!(parse_score_record("").is_err());
        assert!(parse_score_record("SCORE 1\nSCORE 2\n").is_err());
        assert!(parse_score_record("score 1").is_err());
        assert!(parse_score_record("SCORE nan").is_err());
        assert!(parse_score_record("SCORE abc").is_err());
    }

    #[test]
    fn escalation_examples() {
        let s = TimeoutState { stage: 1, consecutive_timeouts: 1, patience: 2, multiplier_cap: 4 };
        let n = s.escalate(ExitStatus::Timeout);
        assert_eq!((n.stage, n.consecutive_timeouts), (2, 0));
        let s = TimeoutState { stage: 4, consecutive_timeouts: 1, patience: 2, multiplier_cap: 4 };
        let n = s.escalate(ExitStatus::Timeout);
        assert_eq!((n.stage, n.consecutive_timeouts), (4, 0));
        let s = TimeoutState { stage: 2, consecutive_timeouts: 1, patience: 2, multiplier_cap: 4 };
        let n = s.escalate(ExitStatus::Ok);
        assert_eq!((n.stage, n.consecutive_timeouts), (2, 0));
    }

    #[test]
    fn debug_loop_fixes_on_first_attempt() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let oracle = Oracle::scripted(ScriptedBackend::new().with(Role::DebugFix, format!("```sh\n{WRITE_SEED}```")));
        let mut ts = TimeoutState::default();
        let broken = sol("s1", "undefined_command_xyz\nexit 1\n");
        let (fixed, out) = ex.debug_loop(&oracle, broken, None, ExecMode::dev(3), &mut ts, 2).unwrap();
        assert!(out.succeeded());
        assert_eq!(fixed.id, "s1.fix1");
        assert_eq!(fixed.parent_id.as_deref(), Some("s1"));
        assert_eq!(oracle.calls(), 1);
        let files = fs::read_dir(ex.work_dir().join("submissions")).unwrap().count();
        assert_eq!(files, 1, "two executions, one of which produced a submission");
    }

    #[test]
    fn debug_loop_with_zero_budget_fails_immediately() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let oracle = Oracle::scripted(ScriptedBackend::new());
        let mut ts = TimeoutState::default();
        let err = ex.debug_loop(&oracle, sol("s", "exit 2\n"), None, ExecMode::dev(0), &mut ts, 0).unwrap_err();
        assert!(matches!(err, ExecError::DebugExhausted { attempts: 0, .. }));
        assert_eq!(oracle.calls(), 0);
    }

    #[test]
    fn passing_code_is_returned_unchanged() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let oracle = Oracle::scripted(ScriptedBackend::new());
        let mut ts = TimeoutState::default();
        let s = sol("s", WRITE_SEED);
        let (out_sol, out) = ex.debug_loop(&oracle, s.clone(), None, ExecMode::dev(0), &mut ts, 3).unwrap();
        assert_eq!(out_sol, s);
        assert!(out.succeeded());
        assert_eq!(oracle.calls(), 0);
    }

    #[test]
    fn multi_seed_mean() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        // Seeds 80, 82, 78 map to scores 0.80, 0.82, 0.78.
        let r = ex.multi_seed_eval(&sol("m", WRITE_SEED), &[80, 82, 78], &TimeoutState::default()).unwrap();
        let oracle_mean = (0.80 + 0.82 + 0.78) / 3.0;
        assert!((r.mean - oracle_mean).abs() < 1e-12);
        assert_eq!(r.scores.len(), r.seeds.len());
        let r = ex.multi_seed_eval(&sol("m", WRITE_SEED), &[5], &TimeoutState::default()).unwrap();
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn multi_seed_failures() {
        let (_b, task) = sh_bundle();
        let (_w, ex) = executor(task);
        let err = ex.multi_seed_eval(&sol("m", "exit 1\n"), &[1, 2, 3], &TimeoutState::default()).unwrap_err();
        assert!(matches!(err, ExecError::AllSeedsFailed));
        assert!(matches!(ex.multi_seed_eval(&sol("m", WRITE_SEED), &[], &TimeoutState::default()), Err(ExecError::BadSeeds(_))));
        assert!(matches!(
            ex.multi_seed_eval(&sol("m", WRITE_SEED), &[1, 1], &TimeoutState::default()),
            Err(ExecError::BadSeeds(_))
        ));
    }

    #[test]
    fn concurrent_runs_respect_the_running_permit() {
        let (_b, task) = sh_bundle();
        let work = tempfile::tempdir().unwrap();
        let ex = Executor::new(task, work.path(), Permits::new(2, 1, 1)).unwrap();
        let code = format!("sleep 0.2\n{WRITE_SEED}");
        std::thread::scope(|s| {
            for i in 0..6 {
                let ex = &ex;
                let code = code.clone();
                s.spawn(move || {
                    ex.execute(&sol(&format!("c{i}"), &code), None, ExecMode::full(i), &TimeoutState::default()).unwrap()
                });
            }
        });
        assert_eq!(ex.permits().running.peak(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn status() -> impl Strategy<Value = ExitStatus> {
            prop_oneof![
                Just(ExitStatus::Ok),
                Just(ExitStatus::NonzeroExit),
                Just(ExitStatus::Timeout),
                Just(ExitStatus::ResourceKill)
            ]
        }

        proptest! {
            #[test]
            fn escalation_is_monotone_and_capped(outcomes in proptest::collection::vec(status(), 0..40)) {
                let mut s = TimeoutState::default();
                for o in outcomes {
                    let n = s.escalate(o);
                    prop_assert!(n.stage >= s.stage);
                    prop_assert!(n.multiplier() <= 4);
                    if o != ExitStatus::Timeout {
                        prop_assert_eq!(n, n.escalate(o));
                        prop_assert_eq!(n.stage, s.stage);
                    }
                    s = n;
                }
            }
        }
    }
}
