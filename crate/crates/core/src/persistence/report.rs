use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::events::{LogHeader, Strategy};
use crate::experiments::{spearman_ic, Ic};
use crate::mcts::Tree;
use crate::memory::SuccessMemory;
use crate::model::{fmt_score, Budget, Direction, Score, TraceState};

/// Values the final record of a run carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalInfo {
    pub trace_id: Option<u32>,
    pub solution_id: Option<String>,
    pub validation_score: Score,
    pub mean: Option<f64>,
    pub budget: Budget,
    pub partial: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub accepted: usize,
    pub best_score: Score,
    pub best_solution_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeCounts {
    pub nodes: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub task_id: String,
    pub metric_name: String,
    pub direction: Direction,
    pub best_trace: Option<u32>,
    pub best_solution_id: Option<String>,
    pub best_validation_score: Score,
    pub final_mean: Option<f64>,
    pub iterations: usize,
    pub accepted: usize,
    pub improvement_rate: Option<f64>,
    pub ic: Option<f64>,
    pub per_trace: BTreeMap<u32, TraceSummary>,
    pub memory_size: usize,
    pub tree: Option<TreeCounts>,
    pub budget: Budget,
    pub partial: bool,
    pub error: Option<String>,
}

impl RunReport {
    /// Summarises run state. `test_pairs` holds (validation Δ, test Δ) pairs
    /// for iterations where a held-out score was reported.
    pub fn from_state(
        header: &LogHeader,
        traces: &[TraceState],
        memory: &SuccessMemory,
        tree: Option<&Tree>,
        fin: &FinalInfo,
        test_pairs: &[(f64, f64)],
    ) -> Self {
        let per_trace: BTreeMap<u32, TraceSummary> = traces
            .iter()
            .map(|t| {
                (
                    t.trace_id,
                    TraceSummary {
                        iterations: t.history.len(),
                        accepted: t.n_succ as usize,
                        best_score: t.best_score,
                        best_solution_id: t.best_solution.id.clone(),
                    },
                )
            })
            .collect();
        let iterations: usize = per_trace.values().map(|s| s.iterations).sum();
        let accepted: usize = per_trace.values().map(|s| s.accepted).sum();
        let ic = if test_pairs.len() >= 2 {
            let (v, t): (Vec<f64>, Vec<f64>) = test_pairs.iter().copied().unzip();
            spearman_ic(&v, &t).ok().and_then(Ic::value)
        } else {
            None
        };
        Self {
            strategy: header.strategy,
            task_id: header.task_id.clone(),
            metric_name: header.metric_name.clone(),
            direction: header.direction,
            best_trace: fin.trace_id,
            best_solution_id: fin.solution_id.clone(),
            best_validation_score: fin.validation_score,
            final_mean: fin.mean,
            iterations,
            accepted,
            improvement_rate: (iterations > 0).then(|| accepted as f64 / iterations as f64),
            ic,
            per_trace,
            memory_size: memory.len(),
            tree: tree.map(|t| TreeCounts { nodes: t.len(), edges: t.edge_count() }),
            budget: fin.budget.clone(),
            partial: fin.partial,
            error: fin.error.clone(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task {} ({} {}, {})", self.task_id, self.metric_name, self.direction, self.strategy);
        let _ = writeln!(
            out,
            "best score {} (solution {}, trace {})",
            fmt_score(self.best_validation_score),
            self.best_solution_id.as_deref().unwrap_or("none"),
            self.best_trace.map_or("none".to_string(), |t| t.to_string())
        );
        if let Some(m) = self.final_mean {
            let _ = writeln!(out, "multi-seed mean {m}");
        }
        match self.improvement_rate {
            Some(r) => {
                let _ = writeln!(out, "improvement rate {:.1}% ({}/{})", r * 100.0, self.accepted, self.iterations);
            }
            None => {
                let _ = writeln!(out, "improvement rate n/a (0 iterations)");
            }
        }
        if let Some(ic) = self.ic {
            let _ = writeln!(out, "IC {ic:.4}");
        }
        for (id, t) in &self.per_trace {
            let _ = writeln!(
                out,
                "trace {id}: {} iterations, {} accepted, best {}",
                t.iterations,
                t.accepted,
                fmt_score(t.best_score)
            );
        }
        let _ = writeln!(out, "memory size {}", self.memory_size);
        if let Some(t) = self.tree {
            let _ = writeln!(out, "tree {} nodes, {} edges", t.nodes, t.edges);
        }
        let _ = writeln!(
            out,
            "budget {}/{} consumed, {} extension request(s)",
            self.budget.consumed, self.budget.total, self.budget.extensions_granted
        );
        if self.partial {
            let _ = writeln!(out, "PARTIAL: {}", self.error.as_deref().unwrap_or("run stopped early"));
        }
        out
    }
}
