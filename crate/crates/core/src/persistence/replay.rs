use std::collections::{BTreeMap, BTreeSet};

use super::events::{EventBody, LogHeader, RunEvent};
use super::report::{FinalInfo, RunReport};
use crate::error::LogError;
use crate::mcts::Tree;
use crate::memory::SuccessMemory;
use crate::model::{Solution, TraceState};

/// Run state rebuilt from a log alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Replayed {
    pub traces: Vec<TraceState>,
    pub memory: SuccessMemory,
    pub tree: Option<Tree>,
    pub final_info: Option<FinalInfo>,
    pub report: Option<RunReport>,
}

fn corrupt(seq: u64, reason: impl Into<String>) -> LogError {
    LogError::CorruptLog { seq, reason: reason.into() }
}

/// Rebuilds traces, memory, tree and report without calling an oracle or
/// executor.
pub fn replay(header: Option<&LogHeader>, events: &[RunEvent]) -> Result<Replayed, LogError> {
    let Some(header) = header else {
        return Ok(Replayed { traces: Vec::new(), memory: SuccessMemory::new(), tree: None, final_info: None, report: None });
    };
    let direction = header.direction;
    let mut traces: BTreeMap<u32, TraceState> = BTreeMap::new();
    let mut executed: BTreeMap<(u32, u32), Solution> = BTreeMap::new();
    let mut gated: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut memory = SuccessMemory::new();
    let mut tree: Option<Tree> = None;
    let mut fin: Option<FinalInfo> = None;
    let mut test_pairs = Vec::new();
    let mut last_seq = 0;

    for e in events {
        last_seq = e.seq;
        let trace = e.trace_id;
        match &e.body {
            EventBody::Init { initial_best, .. } => {
                let id = trace.ok_or_else(|| corrupt(e.seq, "init without trace id"))?;
                traces.insert(id, TraceState::new(id, initial_best.clone()));
            }
            EventBody::Executed { iteration, solution, .. } => {
                let id = trace.ok_or_else(|| corrupt(e.seq, "execution without trace id"))?;
                executed.insert((id, *iteration), solution.clone());
            }
            EventBody::GateOutcome { iteration, .. } => {
                let id = trace.ok_or_else(|| corrupt(e.seq, "gate outcome without trace id"))?;
                gated.insert((id, *iteration));
            }
            EventBody::Decision { iteration, record, test_delta } => {
                let id = trace.ok_or_else(|| corrupt(e.seq, "decision without trace id"))?;
                let key = (id, *iteration);
                let solution =
                    executed.remove(&key).ok_or_else(|| corrupt(e.seq, "decision without a prior execution"))?;
                if !gated.remove(&key) {
                    return Err(corrupt(e.seq, "decision without a prior gate outcome"));
                }
                let state = traces.get_mut(&id).ok_or_else(|| corrupt(e.seq, format!("unknown trace {id}")))?;
                state.record(record.clone(), &solution, direction);
                if let (Some(v), Some(t)) = (record.delta, test_delta) {
                    test_pairs.push((v, *t));
                }
            }
            EventBody::MemoryCommit { entry } => memory.restore(entry.clone()),
            EventBody::TreeUpdate { node, parent, solution_id, path, reward, .. } => {
                match (parent, tree.as_mut()) {
                    (None, None) => {
                        let max_depth = header.mcts.as_ref().map_or(10, |m| m.max_depth);
                        tree = Some(Tree::new(solution_id.clone(), max_depth));
                    }
                    (Some(p), Some(t)) => {
                        let id = t.add_child(*p, solution_id.clone()).map_err(|err| corrupt(e.seq, err.to_string()))?;
                        if id != *node {
                            return Err(corrupt(e.seq, format!("node id {node} where {id} was expected")));
                        }
                    }
                    _ => return Err(corrupt(e.seq, "tree update out of order")),
                }
                let t = tree.as_mut().expect("tree exists");
                t.backprop(path, *reward).map_err(|err| corrupt(e.seq, err.to_string()))?;
            }
            EventBody::Final { trace_id, solution, validation_score, mean, budget, partial, error, .. } => {
                fin = Some(FinalInfo {
                    trace_id: *trace_id,
                    solution_id: solution.as_ref().map(|s| s.id.clone()),
                    validation_score: *validation_score,
                    mean: *mean,
                    budget: budget.clone(),
                    partial: *partial,
                    error: error.clone(),
                });
            }
            EventBody::HypothesisChosen { .. } | EventBody::BudgetChange { .. } | EventBody::Broadcast { .. } => {}
        }
    }

    let traces: Vec<TraceState> = traces.into_values().collect();
    if events.is_empty() {
        return Ok(Replayed { traces, memory, tree, final_info: None, report: None });
    }
    let Some(fin) = fin else {
        let reason = if executed.is_empty() && gated.is_empty() { "log ends without a final record" } else { "log ends mid-iteration" };
        return Err(corrupt(last_seq + 1, reason));
    };
    if !fin.partial && !(executed.is_empty() && gated.is_empty()) {
        return Err(corrupt(last_seq + 1, "iteration left open in a completed run"));
    }
    let report = RunReport::from_state(header, &traces, &memory, tree.as_ref(), &fin, &test_pairs);
    Ok(Replayed { traces, memory, tree, final_info: Some(fin), report: Some(report) })
}
