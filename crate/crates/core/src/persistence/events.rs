use std::fmt;

use serde::{Deserialize, Serialize};

use crate::executor::ExecKind;
use crate::mcts::MctsSettings;
use crate::memory::MemoryEntry;
use crate::model::{Budget, Direction, ExecutionTrace, Hypothesis, IterationRecord, Origin, Score, Solution};
use crate::validation::GateOutcome;

pub const SCHEMA: &str = "engine-events";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Multitrace,
    Mcts,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Multitrace => "multitrace",
            Strategy::Mcts => "mcts",
        })
    }
}

/// First line of every event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    pub strategy: Strategy,
    pub task_id: String,
    pub metric_name: String,
    pub direction: Direction,
    pub deterministic: bool,
    pub n_traces: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcts: Option<MctsSettings>,
}

impl LogHeader {
    pub fn new(strategy: Strategy, task_id: &str, metric_name: &str, direction: Direction) -> Self {
        Self {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
            strategy,
            task_id: task_id.into(),
            metric_name: metric_name.into(),
            direction,
            deterministic: false,
            n_traces: 1,
            seed: 0,
            mcts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Init,
    HypothesisChosen,
    Executed,
    GateOutcome,
    Decision,
    MemoryCommit,
    BudgetChange,
    TreeUpdate,
    Final,
    Broadcast,
}

/// Pool member as shown to the selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub text: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    /// A trace's initial hypothesis and the candidate implemented for it.
    Init {
        hypothesis: Hypothesis,
        priors: usize,
        candidate: Option<Solution>,
        initial_best: Solution,
    },
    HypothesisChosen {
        iteration: u32,
        hypothesis: Hypothesis,
        lambda: Option<u32>,
        pool: Vec<PoolEntry>,
        warnings: Vec<String>,
    },
    Executed {
        iteration: u32,
        solution: Solution,
        mode: ExecKind,
        seed: u64,
        score: Score,
        trace: ExecutionTrace,
    },
    GateOutcome {
        iteration: u32,
        outcome: GateOutcome,
    },
    Decision {
        iteration: u32,
        record: IterationRecord,
        /// Held-out improvement, when the task reports one.
        test_delta: Option<f64>,
    },
    MemoryCommit {
        entry: MemoryEntry,
    },
    BudgetChange {
        before: Budget,
        after: Budget,
        reason: String,
    },
    TreeUpdate {
        node: usize,
        parent: Option<usize>,
        depth: u32,
        solution_id: String,
        /// Child ids from the root's first edge down to `node`.
        path: Vec<usize>,
        reward: f64,
        accepted: bool,
        score: Score,
    },
    Final {
        trace_id: Option<u32>,
        solution: Option<Solution>,
        validation_score: Score,
        seed_scores: Vec<Score>,
        mean: Option<f64>,
        budget: Budget,
        partial: bool,
        error: Option<String>,
    },
    Broadcast {
        elapsed_hours: f64,
        memory_size: usize,
    },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::Init { .. } => EventKind::Init,
            EventBody::HypothesisChosen { .. } => EventKind::HypothesisChosen,
            EventBody::Executed { .. } => EventKind::Executed,
            EventBody::GateOutcome { .. } => EventKind::GateOutcome,
            EventBody::Decision { .. } => EventKind::Decision,
            EventBody::MemoryCommit { .. } => EventKind::MemoryCommit,
            EventBody::BudgetChange { .. } => EventKind::BudgetChange,
            EventBody::TreeUpdate { .. } => EventKind::TreeUpdate,
            EventBody::Final { .. } => EventKind::Final,
            EventBody::Broadcast { .. } => EventKind::Broadcast,
        }
    }

    /// Iteration index for per-iteration events.
    pub fn iteration(&self) -> Option<u32> {
        match self {
            EventBody::HypothesisChosen { iteration, .. }
            | EventBody::Executed { iteration, .. }
            | EventBody::GateOutcome { iteration, .. }
            | EventBody::Decision { iteration, .. } => Some(*iteration),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub logical_time: u64,
    pub trace_id: Option<u32>,
    #[serde(flatten)]
    pub body: EventBody,
}

impl RunEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }
}
