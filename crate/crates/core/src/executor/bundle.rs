use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::ExecError;
use crate::model::Task;

pub const TASK_FILE: &str = "task.toml";
pub const GRADER: &str = "grade";
pub const DEV_DIR: &str = "data/dev";
pub const FULL_DIR: &str = "data/full";

fn missing(path: &Path, reason: impl Into<String>) -> ExecError {
    ExecError::BundleMissing { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads and validates `task.toml` without checking the rest of the layout.
pub fn load_task(bundle: &Path) -> Result<Task, ExecError> {
    let path = bundle.join(TASK_FILE);
    let text = fs::read_to_string(&path).map_err(|e| missing(&path, e.to_string()))?;
    let mut task: Task = toml::from_str(&text).map_err(|e| missing(&path, e.to_string()))?;
    task.validate().map_err(|e| missing(&path, e.to_string()))?;
    task.bundle_path = bundle.to_path_buf();
    Ok(task)
}

/// Every layout problem in the bundle, empty when it is usable.
pub fn bundle_problems(bundle: &Path) -> Vec<String> {
    let mut problems = Vec::new();
    if let Err(e) = load_task(bundle) {
        problems.push(e.to_string());
    }
    let grader = bundle.join(GRADER);
    match fs::metadata(&grader) {
        Ok(m) if m.is_file() && m.permissions().mode() & 0o111 != 0 => {}
        Ok(_) => problems.push(format!("{} is not an executable file", grader.display())),
        Err(_) => problems.push(format!("{} is missing", grader.display())),
    }
    for dir in [DEV_DIR, FULL_DIR] {
        if !bundle.join(dir).is_dir() {
            problems.push(format!("{} is missing", bundle.join(dir).display()));
        }
    }
    if let Ok(task) = load_task(bundle) {
        if let Some(b) = &task.baseline {
            if !bundle.join(b).is_file() {
                problems.push(format!("baseline {} is missing", bundle.join(b).display()));
            }
        }
    }
    problems
}

/// Loads the task and checks the full bundle layout.
pub fn lint_bundle(bundle: &Path) -> Result<Task, ExecError> {
    let problems = bundle_problems(bundle);
    if !problems.is_empty() {
        return Err(missing(bundle, problems.join("; ")));
    }
    load_task(bundle)
}

/// Sorted `(path, len, mtime)` listing of everything under `root`.
pub fn fingerprint(root: &Path) -> Vec<(PathBuf, u64, Option<SystemTime>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for entry in entries.flatten() {
            let path = entry.path();
            let Ok(meta) = entry.metadata() else { continue };
            if meta.is_dir() {
                stack.push(path.clone());
            }
            out.push((path, meta.len(), meta.modified().ok()));
        }
    }
    out.sort();
    out
}

/// Writes a development subset of a CSV: rows shuffled with a fixed seed,
/// then the first `ceil(fraction * n)` kept. Returns the number of rows
/// written.
pub fn write_dev_subset(src: &Path, dst: &Path, fraction: f64, seed: u64) -> Result<usize, ExecError> {
    let csv_err = |e: csv::Error| ExecError::Io(std::io::Error::other(e));
    let mut reader = csv::Reader::from_path(src).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let mut rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(csv_err)?;
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((fraction.clamp(0.0, 1.0) * rows.len() as f64).ceil() as usize).min(rows.len());
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(dst).map_err(csv_err)?;
    writer.write_record(&headers).map_err(csv_err)?;
    for row in &rows[..keep] {
        writer.write_record(row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(keep)
}
