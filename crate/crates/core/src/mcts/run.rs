use std::time::Instant;

use super::{reward, MctsSettings, Tree};
use crate::error::{EngineError, ReasoningError, TreeError};
use crate::executor::{ExecMode, Executor};
use crate::memory::SuccessMemory;
use crate::model::{BudgetMode, Component, Direction, Hypothesis, Origin, IterationRecord, Score, Solution, StructuredFeedback, Task, TraceState};
use crate::multitrace::{Candidate, Env, Evaluated, RunConfig};
use crate::oracle::Oracle;
use crate::persistence::{EventBody, FinalInfo, LogHeader, Recorder, RunReport, Strategy};
use crate::reasoning::{extract_challenges, generate_hypothesis, implement, HypothesisOptions, ReasoningContext};

/// The search runs as a single trace with this id.
const TRACE: u32 = 1;

#[derive(Debug)]
pub struct MctsOutcome {
    pub best: Option<Solution>,
    pub best_score: Score,
    pub tree: Tree,
    pub report: RunReport,
    pub error: Option<EngineError>,
}

pub fn mcts_header(task: &Task, cfg: &RunConfig) -> LogHeader {
    let mut h = LogHeader::new(Strategy::Mcts, &task.id, &task.metric_name, task.direction);
    h.deterministic = cfg.deterministic;
    h.n_traces = 1;
    h.seed = cfg.seed;
    h.mcts = Some(MctsSettings::from(cfg));
    h
}

struct NodeInfo {
    solution: Solution,
    score: Score,
    accepted: bool,
    feedback: Option<StructuredFeedback>,
    record: Option<IterationRecord>,
}

fn reaches(score: Score, threshold: Option<f64>, direction: Direction) -> bool {
    match (score, threshold) {
        (Some(v), Some(t)) => direction.sign() * v >= direction.sign() * t,
        _ => false,
    }
}

struct Search<'a> {
    env: Env<'a>,
    settings: MctsSettings,
    tree: Tree,
    nodes: Vec<NodeInfo>,
    state: TraceState,
    budget: crate::model::Budget,
    started: Instant,
    iteration: u32,
    run_timeout: crate::executor::TimeoutState,
    coder_timeout: crate::executor::TimeoutState,
    stopped: bool,
}

impl Search<'_> {
    fn claim(&mut self) -> bool {
        if self.budget.mode == BudgetMode::WallClockSeconds {
            self.budget.consumed = self.started.elapsed().as_secs_f64();
        }
        if self.budget.exhausted() {
            return false;
        }
        if self.budget.mode == BudgetMode::IterationCount {
            self.budget.consumed += 1.0;
        }
        true
    }

    fn root(&mut self, baseline: Option<Solution>) -> Result<(), EngineError> {
        let cfg = self.env.cfg;
        let (solution, score) = match baseline {
            Some(sol) => {
                let out = self.env.executor.execute(&sol, None, ExecMode::full(cfg.seed), &self.run_timeout)?;
                (sol, out.score)
            }
            None => (
                Solution { id: "root".into(), code: String::new(), parent_id: None, hypothesis_id: None, created_at: 0 },
                None,
            ),
        };
        self.env.emit(
            TRACE,
            0,
            EventBody::Init {
                hypothesis: Hypothesis::new("root", "starting solution", Component::Workflow, "", Origin::Local),
                priors: 0,
                candidate: None,
                initial_best: solution.clone(),
            },
        );
        self.state = TraceState::new(TRACE, solution.clone());
        self.tree.backprop(&[], 0.0)?;
        self.env.emit(
            TRACE,
            0,
            EventBody::TreeUpdate {
                node: 0,
                parent: None,
                depth: 0,
                solution_id: solution.id.clone(),
                path: Vec::new(),
                reward: 0.0,
                accepted: true,
                score,
            },
        );
        self.nodes.push(NodeInfo { solution, score, accepted: true, feedback: None, record: None });
        Ok(())
    }

    fn path_history(&self, node: usize) -> Result<Vec<IterationRecord>, TreeError> {
        Ok(self.tree.path_to(node)?.into_iter().filter_map(|n| self.nodes[n].record.clone()).collect())
    }

    /// One expansion of up to `expand_k` children under `leaf`.
    fn expand(&mut self, path: Vec<usize>) -> Result<(), EngineError> {
        let leaf = path.last().copied().unwrap_or(0);
        let cfg = self.env.cfg;
        let depth = self.tree.node(leaf)?.depth;
        if depth >= self.tree.max_depth {
            return Err(TreeError::ExpansionRefused { node: leaf, depth, max_depth: self.tree.max_depth }.into());
        }
        let history = self.path_history(leaf)?;
        let parent_solution = self.nodes[leaf].solution.clone();
        let parent_score = self.nodes[leaf].score;
        let parent_feedback = self.nodes[leaf].feedback.clone();
        let ctx = ReasoningContext {
            task: self.env.task,
            best: &parent_solution,
            feedback: parent_feedback.as_ref(),
            history: &history,
        };
        let k = self.settings.expand_k;
        let challenges = extract_challenges(3, &ctx, k, self.env.oracle)?;
        if challenges.is_empty() {
            return Err(ReasoningError::EmptyCandidateSet.into());
        }
        let opts = HypothesisOptions { unique: cfg.unique_hypothesis, simple: cfg.simple_hypothesis, reprompts: 1 };
        let mut seen: Vec<String> = history.iter().map(|r| r.hypothesis.text.clone()).collect();
        let base = (!parent_solution.code.trim().is_empty()).then_some(&parent_solution);
        for j in 0..k {
            if self.stopped || !self.claim() {
                self.stopped = true;
                return Ok(());
            }
            self.iteration += 1;
            let it = self.iteration;
            let challenge = &challenges[j % challenges.len()];
            let hypothesis =
                generate_hypothesis(format!("n{it}-h"), challenge, &ctx, &seen, &opts, self.env.oracle)?.hypothesis;
            seen.push(hypothesis.text.clone());
            self.env.emit(
                TRACE,
                u64::from(it),
                EventBody::HypothesisChosen {
                    iteration: it,
                    hypothesis: hypothesis.clone(),
                    lambda: None,
                    pool: Vec::new(),
                    warnings: Vec::new(),
                },
            );
            let solution_id = format!("n{it}");
            let result = implement(
                solution_id.clone(),
                &hypothesis,
                base,
                self.env.task,
                self.env.oracle,
                self.env.executor,
                &mut self.coder_timeout,
                cfg.max_fix_iters,
                cfg.exec_seed(it),
            );
            let candidate = Candidate::from_implement(hypothesis, &solution_id, result)?;
            let Evaluated { record, solution } =
                self.env.evaluate(TRACE, it, candidate, (&parent_solution, parent_score), &mut self.run_timeout)?;
            let score = record.feedback.perf.current;
            let r = reward(record.decision, score, self.env.task.direction, self.settings.reward)?;
            let child = self.tree.add_child(leaf, solution.id.clone())?;
            let mut child_path = path.clone();
            child_path.push(child);
            self.tree.backprop(&child_path, r)?;
            self.env.emit(
                TRACE,
                u64::from(it),
                EventBody::TreeUpdate {
                    node: child,
                    parent: Some(leaf),
                    depth: depth + 1,
                    solution_id: solution.id.clone(),
                    path: child_path,
                    reward: r,
                    accepted: record.decision,
                    score,
                },
            );
            let accepted = record.decision;
            self.state.record(record.clone(), &solution, self.env.task.direction);
            self.nodes.push(NodeInfo {
                solution,
                score,
                accepted,
                feedback: Some(record.feedback.clone()),
                record: Some(record),
            });
            if accepted && reaches(score, self.settings.early_stop, self.env.task.direction) {
                self.stopped = true;
            }
        }
        Ok(())
    }

    fn search(&mut self) -> Result<(), EngineError> {
        while !self.stopped {
            let Some(path) = self.tree.select_leaf(self.settings.c_puct) else { break };
            if self.budget.exhausted() {
                break;
            }
            self.expand(path)?;
        }
        Ok(())
    }

    /// Highest-scoring accepted node other than the root; ties go to the
    /// earlier node.
    fn best(&self) -> Option<(usize, f64)> {
        let sign = self.env.task.direction.sign();
        let mut best: Option<(usize, f64)> = None;
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let Some(v) = n.score.filter(|_| n.accepted) else { continue };
            if best.is_none_or(|(_, b)| sign * v > sign * b) {
                best = Some((i, v));
            }
        }
        best
    }
}

/// PUCT search: select a leaf, expand it with `expand_k` children, each
/// executed, validated, rewarded and backpropagated. One evaluation is
/// one budget unit. No success memory is kept.
pub fn mcts_run(task: &Task, cfg: &RunConfig, oracle: &Oracle, executor: &Executor, recorder: &Recorder) -> MctsOutcome {
    let settings = MctsSettings::from(cfg);
    let root_placeholder =
        Solution { id: "root".into(), code: String::new(), parent_id: None, hypothesis_id: None, created_at: 0 };
    let mut s = Search {
        env: Env { task, cfg, oracle, executor, recorder },
        settings,
        tree: Tree::new("root", settings.max_depth),
        nodes: Vec::new(),
        state: TraceState::new(TRACE, root_placeholder),
        budget: cfg.budget(),
        started: Instant::now(),
        iteration: 0,
        run_timeout: cfg.run_timeout(),
        coder_timeout: cfg.coder_timeout(),
        stopped: false,
    };
    let mut error = None;
    match crate::multitrace::baseline_solution(task) {
        Ok(baseline) => {
            if let Some(b) = &baseline {
                s.tree.nodes[0].solution_id = b.id.clone();
            }
            if let Err(e) = s.root(baseline) {
                error = Some(e);
            }
        }
        Err(e) => error = Some(e.into()),
    }
    if error.is_none() {
        if let Err(e) = s.search() {
            error = Some(e);
        }
    }

    let best = s.best();
    let error_text = error.as_ref().map(ToString::to_string);
    let fin = FinalInfo {
        trace_id: best.map(|_| TRACE),
        solution_id: best.map(|(i, _)| s.nodes[i].solution.id.clone()),
        validation_score: best.map(|(_, v)| v),
        mean: None,
        budget: s.budget.clone(),
        partial: error.is_some(),
        error: error_text.clone(),
    };
    recorder.emit(
        None,
        u64::from(s.iteration) + 1,
        EventBody::Final {
            trace_id: fin.trace_id,
            solution: best.map(|(i, _)| s.nodes[i].solution.clone()),
            validation_score: fin.validation_score,
            seed_scores: Vec::new(),
            mean: None,
            budget: s.budget.clone(),
            partial: fin.partial,
            error: error_text,
        },
    );
    let header = mcts_header(task, cfg);
    let traces: Vec<TraceState> = if s.nodes.is_empty() { Vec::new() } else { vec![s.state.clone()] };
    let report = RunReport::from_state(&header, &traces, &SuccessMemory::new(), (!s.nodes.is_empty()).then_some(&s.tree), &fin, &[]);
    MctsOutcome {
        best: best.map(|(i, _)| s.nodes[i].solution.clone()),
        best_score: best.map(|(_, v)| v),
        tree: s.tree,
        report,
        error,
    }
}
