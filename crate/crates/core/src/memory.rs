//! Shared success memory and the probabilistic interaction kernel.

use std::sync::{Arc, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DomainError, MemoryError};
use crate::model::{Direction, Hypothesis, IterationRecord, Score, StructuredFeedback};
use crate::oracle::cosine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub hypothesis: Hypothesis,
    pub feedback: StructuredFeedback,
    pub delta: f64,
    pub trace_id: u32,
    pub iteration: u32,
    pub embedding: Vec<f64>,
}

impl MemoryEntry {
    /// Score the entry's iteration achieved.
    pub fn score(&self) -> Score {
        self.feedback.perf.current
    }
}

/// Flat per-entry record used in snapshots and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshotRecord {
    pub hypothesis: String,
    pub delta: f64,
    pub trace_id: u32,
    pub iteration: u32,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 0.05 }
    }
}

impl KernelParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, DomainError> {
        let p = Self { alpha, beta, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(ok(self.alpha) && ok(self.beta) && ok(self.gamma)) || self.alpha + self.beta <= 0.0 {
            return Err(DomainError::Invalid(format!(
                "kernel weights must be finite and >= 0 with alpha + beta > 0 (got {:?})",
                self
            )));
        }
        Ok(())
    }
}

/// Closed form of the potential given similarity `s` and score difference `delta`.
pub fn potential(params: &KernelParams, s: f64, delta: f64, l: u32) -> f64 {
    params.alpha * s * (-params.gamma * f64::from(l)).exp() + params.beta * delta.tanh()
}

/// Score difference of a memory score against the querying trace's best.
/// Zero when either side is missing.
pub fn kernel_delta(h_j: Score, h_star: Score, direction: Direction) -> f64 {
    match (h_j, h_star) {
        (Some(h), Some(best)) if h.is_finite() && best.is_finite() => direction.sign() * (h - best),
        _ => 0.0,
    }
}

/// Potential between a candidate embedding and one memory entry.
pub fn interaction_potential(
    candidate_embedding: &[f64],
    entry: &MemoryEntry,
    params: &KernelParams,
    l: u32,
    h_star: Score,
    direction: Direction,
) -> f64 {
    let s = cosine(candidate_embedding, &entry.embedding);
    potential(params, s, kernel_delta(entry.score(), h_star, direction), l)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|u| (u - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Draws an index from a categorical distribution.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Append-only store of accepted iterations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessMemory {
    entries: Vec<MemoryEntry>,
}

impl SuccessMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Appends an entry for an accepted record; rejected records leave the
    /// memory unchanged. Returns whether an entry was added.
    pub fn commit(&mut self, record: &IterationRecord, embedding: Vec<f64>) -> bool {
        if !record.decision {
            return false;
        }
        self.entries.push(MemoryEntry {
            hypothesis: record.hypothesis.clone(),
            feedback: record.feedback.clone(),
            delta: record.delta.unwrap_or(0.0),
            trace_id: record.trace_id,
            iteration: record.iteration,
            embedding,
        });
        true
    }

    /// Appends an entry recovered from an event log.
    pub fn restore(&mut self, entry: MemoryEntry) {
        self.entries.push(entry);
    }

    /// Copy holding only the entries `keep` accepts, in their original order.
    pub fn filtered(&self, keep: impl Fn(&MemoryEntry) -> bool) -> SuccessMemory {
        SuccessMemory { entries: self.entries.iter().filter(|e| keep(e)).cloned().collect() }
    }

    /// Entry with the largest Δh, earliest on ties.
    pub fn best_entry(&self) -> Result<&MemoryEntry, MemoryError> {
        let mut best: Option<&MemoryEntry> = None;
        for e in &self.entries {
            if best.is_none_or(|b| e.delta > b.delta) {
                best = Some(e);
            }
        }
        best.ok_or(MemoryError::EmptyMemory)
    }

    pub fn potentials(
        &self,
        candidate_embedding: &[f64],
        params: &KernelParams,
        l: u32,
        h_star: Score,
        direction: Direction,
    ) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| interaction_potential(candidate_embedding, e, params, l, h_star, direction))
            .collect()
    }

    pub fn sampling_probabilities(
        &self,
        candidate_embedding: &[f64],
        params: &KernelParams,
        l: u32,
        h_star: Score,
        direction: Direction,
    ) -> Vec<f64> {
        softmax(&self.potentials(candidate_embedding, params, l, h_star, direction))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sample_similar<R: Rng + ?Sized>(
        &self,
        candidate_embedding: &[f64],
        params: &KernelParams,
        l: u32,
        h_star: Score,
        direction: Direction,
        rng: &mut R,
    ) -> Result<&MemoryEntry, MemoryError> {
        if self.entries.is_empty() {
            return Err(MemoryError::EmptyMemory);
        }
        let p = self.sampling_probabilities(candidate_embedding, params, l, h_star, direction);
        Ok(&self.entries[sample_categorical(&p, rng)])
    }

    pub fn snapshot_records(&self) -> Vec<MemorySnapshotRecord> {
        self.entries
            .iter()
            .map(|e| MemorySnapshotRecord {
                hypothesis: e.hypothesis.text.clone(),
                delta: e.delta,
                trace_id: e.trace_id,
                iteration: e.iteration,
                embedding: e.embedding.clone(),
            })
            .collect()
    }
}

/// Memory shared between traces: one writer at a time, many readers.
#[derive(Debug, Clone, Default)]
pub struct SharedMemory(Arc<RwLock<SuccessMemory>>);

impl SharedMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn commit(&self, record: &IterationRecord, embedding: Vec<f64>) -> bool {
        self.0.write().expect("memory lock poisoned").commit(record, embedding)
    }

    /// Commits and, while still holding the write lock, hands the new entry
    /// to `on_commit` so observers see commits in memory order.
    pub fn commit_with(&self, record: &IterationRecord, embedding: Vec<f64>, on_commit: impl FnOnce(&MemoryEntry)) -> bool {
        let mut guard = self.0.write().expect("memory lock poisoned");
        let added = guard.commit(record, embedding);
        if added {
            on_commit(guard.entries.last().expect("entry just added"));
        }
        added
    }

    /// Consistent copy of everything committed so far.
    pub fn snapshot(&self) -> SuccessMemory {
        self.0.read().expect("memory lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.0.read().expect("memory lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
