use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use engine_core::error::{ConfigError, EngineError, LogError, OracleError};
use engine_core::executor::{bundle_problems, lint_bundle, Executor};
use engine_core::experiments::{run_crossover, LabConfig};
use engine_core::mcts::{mcts_header, mcts_run, RewardMode};
use engine_core::model::Task;
use engine_core::multitrace::{log_header, run, RunConfig};
use engine_core::oracle::{
    Backend, LiveBackend, LiveSettings, Oracle, RecordingBackend, ScriptedBackend, SyntheticBackend,
    SyntheticOracleParams, Templates,
};
use engine_core::persistence::{load_config, read_log, replay, Recorder, RunReport};

const EXIT_FAILURE: u8 = 1;

/// Writes to stdout; a reader that closed the pipe early ends the process quietly.
fn out(text: String) {
    use std::io::Write;
    if let Err(e) = std::io::stdout().lock().write_all(text.as_bytes()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}
const EXIT_CONFIG: u8 = 2;
const EXIT_BUNDLE: u8 = 3;
const EXIT_ORACLE: u8 = 4;
const EXIT_INVARIANT: u8 = 5;

#[derive(Parser)]
#[command(name = "engine", version, about = "Optimise executable solutions for graded tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-trace optimisation of a task bundle.
    Run(RunArgs),
    /// PUCT tree search over a task bundle.
    Mcts {
        #[command(flatten)]
        run: RunArgs,
        /// Exploration constant.
        #[arg(long)]
        c_puct: Option<f64>,
        /// Children created per expansion.
        #[arg(long)]
        expand_k: Option<usize>,
        #[arg(long)]
        max_depth: Option<u32>,
        /// binary or score
        #[arg(long)]
        reward: Option<RewardMode>,
    },
    /// Gradient-vs-search crossover lab on a synthetic landscape.
    Compare {
        /// Comma-separated oracle fidelities in [0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.9")]
        fidelities: Vec<f64>,
        /// Seeds per fidelity level.
        #[arg(long)]
        seeds: Option<usize>,
        /// TOML file with lab settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write a whitespace-separated data file for plotting.
        #[arg(long)]
        plot_data: Option<PathBuf>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Summarise an event log.
    Report {
        log: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Rebuild run state from an event log and check its consistency.
    Replay { log: PathBuf },
    /// Check a task bundle's layout.
    Lint { task_dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    task_dir: PathBuf,
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// live, scripted:<fixture.jsonl> or synthetic:<fidelity>
    #[arg(long, default_value = "live")]
    oracle: String,
    /// Sequential scheduling, scrubbed timings and per-event flushing.
    #[arg(long)]
    deterministic: bool,
    /// Event log path (default: <work-dir>/events.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for sandboxes and outputs (default: runs/<task-id>).
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Save every oracle response as a scripted fixture.
    #[arg(long)]
    record_oracle: Option<PathBuf>,
    /// Directory with prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Iteration budget; overrides the config.
    #[arg(long)]
    budget: Option<u64>,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Io(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Engine(e.into())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::Engine(e.into())
    }
}

impl From<LogError> for CliError {
    fn from(e: LogError) -> Self {
        CliError::Engine(e.into())
    }
}

fn exit_code(err: &EngineError) -> u8 {
    match err {
        EngineError::Config(_) => EXIT_CONFIG,
        e if e.is_bundle_error() => EXIT_BUNDLE,
        e if e.is_oracle_exhaustion() => EXIT_ORACLE,
        EngineError::Invariant(_) | EngineError::Tree(_) | EngineError::Log(LogError::CorruptLog { .. }) => {
            EXIT_INVARIANT
        }
        EngineError::Log(LogError::SeqGap { .. }) => EXIT_INVARIANT,
        _ => EXIT_FAILURE,
    }
}

fn parse_fidelity(text: &str) -> Result<f64, CliError> {
    text.parse::<f64>()
        .ok()
        .filter(|p| (0.0..=1.0).contains(p))
        .ok_or_else(|| CliError::Engine(ConfigError::Invalid(format!("fidelity `{text}` must be a number in [0, 1]")).into()))
}

fn build_backend(spec: &str, cfg: &RunConfig, templates: Option<&Path>) -> Result<Arc<dyn Backend>, CliError> {
    match spec.split_once(':') {
        None if spec == "live" => {
            let mut settings = LiveSettings::from_env(cfg.temperature)?;
            if std::env::var(engine_core::oracle::MODEL_VAR).is_err() {
                settings.model = cfg.chat_model.clone();
            }
            let templates = match templates {
                Some(dir) => Templates::with_overrides(dir)?,
                None => Templates::default(),
            };
            Ok(Arc::new(LiveBackend::new(settings, templates)))
        }
        Some(("scripted", path)) => Ok(Arc::new(ScriptedBackend::load(Path::new(path))?)),
        Some(("synthetic", p)) => {
            let params = SyntheticOracleParams::new(parse_fidelity(p)?, cfg.seed).map_err(EngineError::from)?;
            Ok(Arc::new(SyntheticBackend::new(params)))
        }
        _ => Err(CliError::Engine(
            ConfigError::Invalid(format!("unknown oracle `{spec}` (live, scripted:<file>, synthetic:<p>)")).into(),
        )),
    }
}

struct Prepared {
    task: Task,
    cfg: RunConfig,
    oracle: Oracle,
    recording: Option<(Arc<RecordingBackend>, PathBuf)>,
    executor: Executor,
    log: PathBuf,
}

fn prepare(args: &RunArgs, tweak: impl FnOnce(&mut RunConfig)) -> Result<Prepared, CliError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if args.deterministic {
        cfg.deterministic = true;
    }
    if let Some(b) = args.budget {
        cfg.budget_iterations = b;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    tweak(&mut cfg);
    cfg.validate()?;
    let task = lint_bundle(&args.task_dir).map_err(EngineError::from)?;
    let backend = build_backend(&args.oracle, &cfg, args.templates.as_deref())?;
    let (backend, recording) = match &args.record_oracle {
        Some(path) => {
            let rec = Arc::new(RecordingBackend::new(backend));
            (rec.clone() as Arc<dyn Backend>, Some((rec, path.clone())))
        }
        None => (backend, None),
    };
    let oracle = Oracle::new(backend, cfg.retry_policy());
    let work = args.work_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&task.id));
    fs::create_dir_all(&work).map_err(|e| CliError::Io(format!("{}: {e}", work.display())))?;
    let mut executor = Executor::new(task.clone(), work.join("sandbox"), cfg.permits()).map_err(EngineError::from)?;
    executor.set_deterministic(cfg.deterministic);
    let log = args.log.clone().unwrap_or_else(|| work.join("events.jsonl"));
    Ok(Prepared { task, cfg, oracle, recording, executor, log })
}

fn print_report(report: &RunReport, json: bool) {
    if json {
        out(serde_json::to_string_pretty(report).expect("reports serialize") + "\n");
    } else {
        out(report.render());
    }
}

fn finish_run(p: &Prepared, recorder: Recorder, report: &RunReport, error: Option<EngineError>, json: bool) -> Result<(), CliError> {
    recorder.finish()?;
    if let Some((rec, path)) = &p.recording {
        fs::write(path, rec.to_jsonl()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    print_report(report, json);
    eprintln!("event log: {}", p.log.display());
    match error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let p = prepare(args, |_| {})?;
    let recorder = Recorder::to_file(&p.log, &log_header(&p.task, &p.cfg))?;
    let out = run(&p.task, &p.cfg, &p.oracle, &p.executor, &recorder);
    if let Some(best) = &out.best {
        eprintln!("best solution {}", best.id);
    }
    finish_run(&p, recorder, &out.report, out.error, args.json)
}

fn cmd_mcts(
    args: &RunArgs,
    c_puct: Option<f64>,
    expand_k: Option<usize>,
    max_depth: Option<u32>,
    reward: Option<RewardMode>,
) -> Result<(), CliError> {
    let p = prepare(args, |cfg| {
        cfg.c_puct = c_puct.unwrap_or(cfg.c_puct);
        cfg.expand_k = expand_k.unwrap_or(cfg.expand_k);
        cfg.max_depth = max_depth.unwrap_or(cfg.max_depth);
        cfg.reward = reward.unwrap_or(cfg.reward);
    })?;
    let recorder = Recorder::to_file(&p.log, &mcts_header(&p.task, &p.cfg))?;
    let out = mcts_run(&p.task, &p.cfg, &p.oracle, &p.executor, &recorder);
    finish_run(&p, recorder, &out.report, out.error, args.json)
}

fn cmd_compare(
    fidelities: &[f64],
    seeds: Option<usize>,
    config: Option<&Path>,
    plot_data: Option<&Path>,
    json: bool,
) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
            toml::from_str::<LabConfig>(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?
        }
        None => LabConfig::default(),
    };
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let report = run_crossover(fidelities, &cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if let Some(path) = plot_data {
        fs::write(path, report.to_gnuplot()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    if json {
        out(serde_json::to_string_pretty(&report).expect("lab reports serialize") + "\n");
    } else {
        out(report.to_table());
        out(format!("# budget parity {}\n", if report.budget_parity() { "holds" } else { "BROKEN" }));
    }
    Ok(())
}

fn load_replay(path: &Path) -> Result<engine_core::persistence::Replayed, CliError> {
    let (header, events) = read_log(path)?;
    Ok(replay(header.as_ref(), &events)?)
}

fn cmd_report(path: &Path, json: bool) -> Result<(), CliError> {
    match load_replay(path)?.report {
        Some(r) => print_report(&r, json),
        None => out("empty log\n".into()),
    }
    Ok(())
}

fn cmd_replay(path: &Path) -> Result<(), CliError> {
    let (header, events) = read_log(path)?;
    let state = replay(header.as_ref(), &events)?;
    out(format!("replayed {} event(s)\n", events.len()));
    for t in &state.traces {
        if let Some(bad) = check_trace(t, header.as_ref().map(|h| h.direction)) {
            return Err(EngineError::Invariant(bad).into());
        }
    }
    if let Some(tree) = &state.tree {
        tree.well_formed().map_err(EngineError::Invariant)?;
    }
    if let Some(r) = &state.report {
        out(r.render());
    }
    Ok(())
}

/// The counters a trace keeps must agree with its history.
fn check_trace(t: &engine_core::model::TraceState, direction: Option<engine_core::model::Direction>) -> Option<String> {
    let direction = direction?;
    let (best, succ, fail) = t.replay_summary(direction);
    (best != t.best_score || succ != t.n_succ || fail != t.n_fail)
        .then(|| format!("trace {} counters disagree with its history", t.trace_id))
}

fn cmd_lint(dir: &Path) -> Result<(), CliError> {
    let problems = bundle_problems(dir);
    if problems.is_empty() {
        out(format!("{}: ok\n", dir.display()));
        return Ok(());
    }
    for p in &problems {
        out(format!("{p}\n"));
    }
    Err(CliError::Engine(
        engine_core::error::ExecError::BundleMissing { path: dir.to_path_buf(), reason: format!("{} problem(s)", problems.len()) }
            .into(),
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Mcts { run, c_puct, expand_k, max_depth, reward } => cmd_mcts(run, *c_puct, *expand_k, *max_depth, *reward),
        Command::Compare { fidelities, seeds, config, plot_data, json } => {
            cmd_compare(fidelities, *seeds, config.as_deref(), plot_data.as_deref(), *json)
        }
        Command::Report { log, json } => cmd_report(log, *json),
        Command::Replay { log } => cmd_replay(log),
        Command::Lint { task_dir } => cmd_lint(task_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                CliError::Engine(err) => exit_code(err),
                CliError::Io(_) => EXIT_FAILURE,
            })
        }
    }
}
