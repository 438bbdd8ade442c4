use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Backend, OracleRequest, OracleResponse, Role};
use crate::error::OracleError;

/// One line of a fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub role: Role,
    pub ordinal: u32,
    pub response_text: String,
}

#[derive(Debug, Default)]
struct Cursor {
    next: HashMap<Role, u32>,
    served: usize,
}

/// Replays canned responses keyed by `(role, per-role ordinal)`, 1-based.
/// Requests are served under a lock so ordinals follow arrival order.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    fixtures: HashMap<(Role, u32), String>,
    cursor: Mutex<Cursor>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the next response for `role`.
    pub fn with(mut self, role: Role, text: impl Into<String>) -> Self {
        self.push(role, text);
        self
    }

    pub fn push(&mut self, role: Role, text: impl Into<String>) {
        let ordinal = self.fixtures.keys().filter(|(r, _)| *r == role).count() as u32 + 1;
        self.fixtures.insert((role, ordinal), text.into());
    }

    pub fn from_records(records: impl IntoIterator<Item = FixtureRecord>) -> Result<Self, OracleError> {
        let mut fixtures = HashMap::new();
        for rec in records {
            if rec.ordinal == 0 {
                return Err(OracleError::Fixture(format!("{}: ordinals are 1-based", rec.role)));
            }
            if fixtures.insert((rec.role, rec.ordinal), rec.response_text).is_some() {
                return Err(OracleError::Fixture(format!("duplicate fixture {}#{}", rec.role, rec.ordinal)));
            }
        }
        Ok(Self { fixtures, cursor: Mutex::default() })
    }

    /// Parses a JSONL fixture file (`{"role", "ordinal", "response_text"}` per line).
    pub fn from_jsonl(text: &str) -> Result<Self, OracleError> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(line)
                .map_err(|e| OracleError::Fixture(format!("line {}: {e}", lineno + 1)))?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let text = fs::read_to_string(path)
            .map_err(|e| OracleError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn requests_served(&self) -> usize {
        self.cursor.lock().expect("cursor lock poisoned").served
    }

    /// Fixtures that were never requested, in `(role, ordinal)` order.
    pub fn unused(&self) -> Vec<(Role, u32)> {
        let cursor = self.cursor.lock().expect("cursor lock poisoned");
        let mut out: Vec<(Role, u32)> = self
            .fixtures
            .keys()
            .filter(|(role, ordinal)| *ordinal >= cursor.next.get(role).copied().unwrap_or(1))
            .copied()
            .collect();
        out.sort();
        out
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        let mut cursor = self.cursor.lock().expect("cursor lock poisoned");
        cursor.served += 1;
        let slot = cursor.next.entry(request.role).or_insert(1);
        let ordinal = *slot;
        *slot += 1;
        match self.fixtures.get(&(request.role, ordinal)) {
            Some(text) => Ok(OracleResponse::text(text.clone())),
            None => Err(OracleError::FixtureMiss { role: request.role, ordinal }),
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

/// Wraps a backend and keeps every response as a fixture record, so a run
/// can later be replayed through [`ScriptedBackend`].
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    log: Mutex<(HashMap<Role, u32>, Vec<FixtureRecord>)>,
}

impl fmt::Debug for RecordingBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RecordingBackend").field("inner", &self.inner.name()).finish()
    }
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self { inner, log: Mutex::default() }
    }

    pub fn records(&self) -> Vec<FixtureRecord> {
        self.log.lock().expect("recording lock poisoned").1.clone()
    }

    pub fn to_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("fixture records serialize") + "\n")
            .collect()
    }
}

impl Backend for RecordingBackend {
    fn complete(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        // Held across the call so ordinals follow completion order.
        let mut log = self.log.lock().expect("recording lock poisoned");
        let resp = self.inner.complete(request)?;
        let slot = log.0.entry(request.role).or_insert(0);
        *slot += 1;
        let ordinal = *slot;
        log.1.push(FixtureRecord { role: request.role, ordinal, response_text: resp.text.clone() });
        Ok(resp)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}
