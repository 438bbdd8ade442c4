use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, HashEmbedder, OracleRequest, OracleResponse, Role};
use crate::error::{DomainError, OracleError};
use crate::model::Direction;

/// How a proposal behaves when it is not the correct one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongProposal {
    /// Uniform over the valid moves that do not improve the true score.
    Misleading,
    /// Uniform over all valid moves, improving ones included.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracleParams {
    /// Probability that a judgement or proposal is correct.
    pub fidelity: f64,
    pub seed: u64,
    pub wrong_proposal: WrongProposal,
}

impl SyntheticOracleParams {
    pub fn new(fidelity: f64, seed: u64) -> Result<Self, DomainError> {
        if !(0.0..=1.0).contains(&fidelity) {
            return Err(DomainError::Invalid(format!("fidelity {fidelity} outside [0, 1]")));
        }
        Ok(Self { fidelity, seed, wrong_proposal: WrongProposal::Misleading })
    }
}

/// A single-coordinate step on an integer lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LandscapeMove {
    pub coord: usize,
    pub step: i32,
}

impl LandscapeMove {
    pub fn apply(&self, state: &[u32]) -> Vec<u32> {
        let mut next = state.to_vec();
        next[self.coord] = (i64::from(next[self.coord]) + i64::from(self.step)) as u32;
        next
    }
}

/// Oracle with tunable fidelity.
///
/// Judgements are correct with probability `fidelity`, otherwise inverted.
/// Code-producing roles return deterministic edits of the base code so the
/// full loop can run without a model.
#[derive(Debug)]
pub struct SyntheticBackend {
    params: SyntheticOracleParams,
    rng: Mutex<ChaCha8Rng>,
    counter: AtomicU64,
    embedder: HashEmbedder,
}

impl SyntheticBackend {
    pub fn new(params: SyntheticOracleParams) -> Self {
        Self {
            params,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(params.seed)),
            counter: AtomicU64::new(0),
            embedder: HashEmbedder::default(),
        }
    }

    pub fn params(&self) -> &SyntheticOracleParams {
        &self.params
    }

    fn next_id(&self) -> u64 {
        self.counter.fetch_add(1, Ordering::SeqCst) + 1
    }

    fn coin(&self) -> bool {
        let p = self.params.fidelity;
        self.rng.lock().expect("rng lock poisoned").gen_bool(p)
    }

    /// Reports `truth` with probability `fidelity`, its negation otherwise.
    pub fn judge_verdict(&self, truth: bool) -> bool {
        if self.coin() {
            truth
        } else {
            !truth
        }
    }

    /// Proposes one move from `state` toward `target` on a lattice with
    /// coordinates in `0..arity`. With probability `fidelity` the move is
    /// uniform over the improving moves; otherwise it follows
    /// [`WrongProposal`]. Returns `None` only when no valid move exists.
    pub fn propose_move(&self, state: &[u32], target: &[u32], arity: u32) -> Option<LandscapeMove> {
        let mut improving = Vec::new();
        let mut other = Vec::new();
        for (coord, (&s, &t)) in state.iter().zip(target).enumerate() {
            for step in [-1i32, 1] {
                let next = i64::from(s) + i64::from(step);
                if next < 0 || next >= i64::from(arity) {
                    continue;
                }
                let mv = LandscapeMove { coord, step };
                if (i64::from(t) - next).abs() < (i64::from(t) - i64::from(s)).abs() {
                    improving.push(mv);
                } else {
                    other.push(mv);
                }
            }
        }
        let correct = self.coin();
        let mut rng = self.rng.lock().expect("rng lock poisoned");
        let pool: Vec<LandscapeMove> = match (correct, self.params.wrong_proposal) {
            (true, _) if !improving.is_empty() => improving,
            (true, _) => other,
            (false, WrongProposal::Misleading) if !other.is_empty() => other,
            (false, WrongProposal::Misleading) => improving,
            (false, WrongProposal::Uniform) => improving.into_iter().chain(other).collect(),
        };
        pool.choose(&mut *rng).copied()
    }

    fn truth_improving(req: &OracleRequest) -> bool {
        let parse = |k: &str| req.get(k).and_then(|v| v.trim().parse::<f64>().ok());
        let direction = match req.get("direction") {
            Some("lower_better") => Direction::LowerBetter,
            _ => Direction::HigherBetter,
        };
        match (parse("current_score"), parse("best_score")) {
            (Some(cur), Some(best)) => direction.sign() * (cur - best) > 0.0,
            (Some(_), None) => true,
            _ => false,
        }
    }

    fn respond(&self, req: &OracleRequest) -> String {
        let first_line = |k: &str| {
            req.get(k).and_then(|v| v.lines().next()).unwrap_or("").trim().to_string()
        };
        match req.role {
            Role::InitHypothesis => {
                let n = self.next_id();
                let comp = ["Model", "FeatureEng", "Ensemble", "Data", "Workflow"][(n % 5) as usize];
                format!("synthetic direction {n}: explore approach family {n}\n{comp}")
            }
            Role::ExtractChallenges => {
                let limit: usize = req.get("limit").and_then(|v| v.parse().ok()).unwrap_or(3).max(1);
                (0..limit)
                    .map(|_| format!("synthetic challenge {}", self.next_id()))
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            Role::GenerateHypothesis => {
                let n = self.next_id();
                format!("synthetic hypothesis {n} addressing {}\nModel", first_line("challenge"))
            }
            Role::ScoreHypothesis => {
                let mut rng = self.rng.lock().expect("rng lock poisoned");
                let mut draw = || (rng.gen::<f64>() * 100.0).round() / 100.0;
                serde_json::json!({
                    "alignment": draw(),
                    "impact": draw(),
                    "novelty": draw(),
                    "feasibility": draw(),
                    "risk_reward": draw(),
                })
                .to_string()
            }
            Role::SelectHypothesis => {
                let size: usize = req.get("pool_size").and_then(|v| v.parse().ok()).unwrap_or(1).max(1);
                let i = self.rng.lock().expect("rng lock poisoned").gen_range(1..=size);
                format!("Select #{i}")
            }
            Role::Sketch => format!("plan: {}", first_line("hypothesis")),
            Role::Implement => {
                let base = req.get("base_code").unwrap_or("");
                let mut code = base.trim_end().to_string();
                code.push_str(&format!("\n# synthetic revision {}: {}\n", self.next_id(), first_line("hypothesis")));
                code
            }
            Role::DebugFix => req.get("code").unwrap_or("").to_string(),
            Role::AlignmentCheck => {
                if self.coin() {
                    "no issues found".into()
                } else {
                    "FINDING: preprocessing may see evaluation labels".into()
                }
            }
            Role::ComprehensiveAnalysis => match req.get("aspect") {
                Some("code_quality") => "no concerns".into(),
                _ => {
                    if self.judge_verdict(Self::truth_improving(req)) {
                        "VERIFIED: the measured change supports the hypothesis".into()
                    } else {
                        "REFUTED: the measured change does not support the hypothesis".into()
                    }
                }
            },
            Role::Judge => {
                if self.judge_verdict(Self::truth_improving(req)) {
                    "ACCEPT".into()
                } else {
                    "REJECT".into()
                }
            }
            Role::BudgetDecision => "no".into(),
            Role::Embed => String::new(),
        }
    }
}

impl Backend for SyntheticBackend {
    fn complete(&self, request: &OracleRequest) -> Result<OracleResponse, OracleError> {
        if request.role == Role::Embed {
            let v = self.embedder.embed(request.get("text").unwrap_or(""))?;
            return Ok(OracleResponse { text: String::new(), structured: None, embedding: Some(v) });
        }
        Ok(OracleResponse::text(self.respond(request)))
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "synthetic"
    }
}
