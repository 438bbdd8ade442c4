//! Synthetic crossover lab: oracle-directed hill climbing against PUCT tree
//! search on a noisy integer lattice, across oracle fidelities.

use std::fmt::Write as _;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{trend_test, TrendTest};
use crate::error::DomainError;
use crate::mcts::{reward, RewardMode, Tree};
use crate::model::Direction;
use crate::oracle::{LandscapeMove, SyntheticBackend, SyntheticOracleParams, WrongProposal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub dimension: usize,
    pub arity: u32,
    pub eval_budget: usize,
    pub sigma0: f64,
    pub seeds: usize,
    pub base_seed: u64,
    pub expand_k: usize,
    pub c_puct: f64,
    pub max_depth: u32,
    pub wrong_proposal: WrongProposal,
    /// Let tree search draw its moves from the oracle instead of uniformly.
    pub mcts_directed: bool,
    pub threads: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            dimension: 8,
            arity: 10,
            eval_budget: 200,
            sigma0: 2.0,
            seeds: 20,
            base_seed: 0x5eed,
            expand_k: 3,
            c_puct: 1.0,
            max_depth: 10,
            wrong_proposal: WrongProposal::Misleading,
            mcts_directed: false,
            threads: thread::available_parallelism().map_or(4, |n| n.get()),
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.dimension == 0 || self.arity < 2 {
            return Err(DomainError::Invalid("landscape needs dimension >= 1 and arity >= 2".into()));
        }
        if self.eval_budget == 0 || self.seeds == 0 || self.expand_k == 0 {
            return Err(DomainError::Invalid("eval_budget, seeds and expand_k must be positive".into()));
        }
        if !(self.sigma0.is_finite() && self.sigma0 >= 0.0 && self.c_puct >= 0.0) {
            return Err(DomainError::Invalid("sigma0 and c_puct must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Observation noise scale at fidelity `p`.
    pub fn noise_scale(&self, p: f64) -> f64 {
        self.sigma0 * (1.0 - p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Landscape {
    pub arity: u32,
    pub target: Vec<u32>,
    pub start: Vec<u32>,
}

impl Landscape {
    pub fn generate<R: Rng + ?Sized>(dimension: usize, arity: u32, rng: &mut R) -> Self {
        let mut draw = || (0..dimension).map(|_| rng.gen_range(0..arity)).collect::<Vec<_>>();
        let target = draw();
        let start = draw();
        Self { arity, target, start }
    }

    pub fn l1(&self, state: &[u32]) -> u64 {
        state.iter().zip(&self.target).map(|(&a, &b)| u64::from(a.abs_diff(b))).sum()
    }

    /// `-L1(state, target)`; zero exactly at the target.
    pub fn score(&self, state: &[u32]) -> f64 {
        -(self.l1(state) as f64)
    }

    pub fn max_l1(&self) -> f64 {
        (self.target.len() as u64 * u64::from(self.arity - 1)) as f64
    }

    pub fn valid_moves(&self, state: &[u32]) -> Vec<LandscapeMove> {
        let mut out = Vec::new();
        for (coord, &s) in state.iter().enumerate() {
            if s > 0 {
                out.push(LandscapeMove { coord, step: -1 });
            }
            if s + 1 < self.arity {
                out.push(LandscapeMove { coord, step: 1 });
            }
        }
        out
    }
}

/// Noisy evaluator that counts every evaluation.
struct Evaluator<'a> {
    landscape: &'a Landscape,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    count: usize,
}

impl<'a> Evaluator<'a> {
    fn new(landscape: &'a Landscape, sigma: f64, seed: u64) -> Self {
        let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
        Self { landscape, noise, rng: ChaCha8Rng::seed_from_u64(seed), count: 0 }
    }

    fn observe(&mut self, state: &[u32]) -> f64 {
        self.count += 1;
        let eps = self.noise.map_or(0.0, |n| n.sample(&mut self.rng));
        self.landscape.score(state) + eps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub final_true_score: f64,
    pub evaluations: usize,
    pub accepted: usize,
    /// Proposal evaluations spent before the target was first reached.
    pub optimum_after: Option<usize>,
    /// Net true progress of every accepted move, in acceptance order.
    pub accepted_gains: Vec<f64>,
}

fn oracle(p: f64, seed: u64, wrong: WrongProposal) -> SyntheticBackend {
    let mut params = SyntheticOracleParams::new(p, seed).expect("fidelity validated by caller");
    params.wrong_proposal = wrong;
    SyntheticBackend::new(params)
}

/// One directed move per evaluation; keep it iff the noisy score improved.
pub fn run_gradient(landscape: &Landscape, p: f64, cfg: &LabConfig, seed: u64) -> StrategyResult {
    let proposer = oracle(p, seed, cfg.wrong_proposal);
    let mut eval = Evaluator::new(landscape, cfg.noise_scale(p), seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut current = landscape.start.clone();
    let mut observed = eval.observe(&current);
    let mut accepted = 0;
    let mut gains = Vec::new();
    let mut optimum_after = (landscape.l1(&current) == 0).then_some(0);
    let mut proposals = 0;
    while eval.count < cfg.eval_budget {
        let Some(mv) = proposer.propose_move(&current, &landscape.target, landscape.arity) else { break };
        let candidate = mv.apply(&current);
        let obs = eval.observe(&candidate);
        proposals += 1;
        if obs - observed > 0.0 {
            gains.push(landscape.score(&candidate) - landscape.score(&current));
            current = candidate;
            observed = obs;
            accepted += 1;
            if optimum_after.is_none() && landscape.l1(&current) == 0 {
                optimum_after = Some(proposals);
            }
        }
    }
    StrategyResult {
        final_true_score: landscape.score(&current),
        evaluations: eval.count,
        accepted,
        optimum_after,
        accepted_gains: gains,
    }
}

/// PUCT search with k-way expansion; the answer is the node with the best
/// observed score.
pub fn run_mcts(landscape: &Landscape, p: f64, cfg: &LabConfig, seed: u64) -> StrategyResult {
    let proposer = cfg.mcts_directed.then(|| oracle(p, seed, cfg.wrong_proposal));
    let mut move_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut eval = Evaluator::new(landscape, cfg.noise_scale(p), seed ^ 0x9e37_79b9_7f4a_7c15);
    let scale = landscape.max_l1() / 2.0;
    let to_reward = |obs: f64| {
        reward(true, Some(obs / scale), Direction::HigherBetter, RewardMode::Score).expect("score present")
    };

    let mut tree = Tree::new("0", cfg.max_depth);
    let mut states = vec![landscape.start.clone()];
    let mut observed = vec![eval.observe(&landscape.start)];
    tree.backprop(&[], to_reward(observed[0])).expect("root path");

    while eval.count < cfg.eval_budget {
        let Some(path) = tree.select_leaf(cfg.c_puct) else { break };
        let leaf = path.last().copied().unwrap_or(0);
        let width = cfg.expand_k.min(cfg.eval_budget - eval.count);
        for _ in 0..width {
            let state = &states[leaf];
            let mv = match &proposer {
                Some(o) => o.propose_move(state, &landscape.target, landscape.arity),
                None => landscape.valid_moves(state).choose(&mut move_rng).copied(),
            };
            let Some(mv) = mv else { break };
            let child_state = mv.apply(state);
            let obs = eval.observe(&child_state);
            let child = tree.add_child(leaf, states.len().to_string()).expect("leaf below depth cap");
            states.push(child_state);
            observed.push(obs);
            let mut child_path = path.clone();
            child_path.push(child);
            tree.backprop(&child_path, to_reward(obs)).expect("fresh path");
        }
    }
    let best = observed
        .iter()
        .enumerate()
        .fold(0, |best, (i, &o)| if o > observed[best] { i } else { best });
    StrategyResult {
        final_true_score: landscape.score(&states[best]),
        evaluations: eval.count,
        accepted: tree.len() - 1,
        optimum_after: None,
        accepted_gains: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed_index: usize,
    pub gradient: f64,
    pub mcts: f64,
    pub gradient_evaluations: usize,
    pub mcts_evaluations: usize,
}

impl SeedOutcome {
    pub fn gap(&self) -> f64 {
        self.gradient - self.mcts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub fidelity: f64,
    pub gradient_mean: f64,
    pub gradient_std: f64,
    pub mcts_mean: f64,
    pub mcts_std: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
    pub outcomes: Vec<SeedOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub config: LabConfig,
    pub levels: Vec<LevelSummary>,
    /// Regression of per-seed gaps on fidelity.
    pub trend: Option<TrendTest>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Landscape for seed `index`; shared by every fidelity level.
pub fn landscape_for(cfg: &LabConfig, index: usize) -> Landscape {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.base_seed ^ index as u64));
    Landscape::generate(cfg.dimension, cfg.arity, &mut rng)
}

/// Rng stream for one simulation: `base ^ level ^ index`, mixed.
pub fn simulation_seed(cfg: &LabConfig, level: usize, index: usize) -> u64 {
    mix(cfg.base_seed ^ mix(level as u64 + 1) ^ (index as u64).rotate_left(32))
}

fn run_level(p: f64, level: usize, cfg: &LabConfig) -> Vec<SeedOutcome> {
    let run_one = |i: usize| {
        let land = landscape_for(cfg, i);
        let seed = simulation_seed(cfg, level, i);
        let g = run_gradient(&land, p, cfg, seed);
        let m = run_mcts(&land, p, cfg, seed);
        SeedOutcome {
            seed_index: i,
            gradient: g.final_true_score,
            mcts: m.final_true_score,
            gradient_evaluations: g.evaluations,
            mcts_evaluations: m.evaluations,
        }
    };
    let workers = cfg.threads.clamp(1, cfg.seeds);
    let mut out: Vec<SeedOutcome> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w..cfg.seeds).step_by(workers).map(run_one).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("lab worker panicked")).collect()
    });
    out.sort_by_key(|o| o.seed_index);
    out
}

pub fn run_crossover(fidelities: &[f64], cfg: &LabConfig) -> Result<CrossoverReport, DomainError> {
    cfg.validate()?;
    if fidelities.is_empty() {
        return Err(DomainError::Invalid("no fidelity levels given".into()));
    }
    if let Some(p) = fidelities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(DomainError::Invalid(format!("fidelity {p} outside [0, 1]")));
    }
    let mut levels = Vec::with_capacity(fidelities.len());
    for (level, &p) in fidelities.iter().enumerate() {
        let outcomes = run_level(p, level, cfg);
        let g: Vec<f64> = outcomes.iter().map(|o| o.gradient).collect();
        let m: Vec<f64> = outcomes.iter().map(|o| o.mcts).collect();
        let gaps: Vec<f64> = outcomes.iter().map(SeedOutcome::gap).collect();
        let (gradient_mean, gradient_std) = mean_std(&g);
        let (mcts_mean, mcts_std) = mean_std(&m);
        let (gap_mean, gap_std) = mean_std(&gaps);
        levels.push(LevelSummary { fidelity: p, gradient_mean, gradient_std, mcts_mean, mcts_std, gap_mean, gap_std, outcomes });
    }
    let xs: Vec<f64> = levels.iter().flat_map(|l| l.outcomes.iter().map(move |_| l.fidelity)).collect();
    let ys: Vec<f64> = levels.iter().flat_map(|l| l.outcomes.iter().map(SeedOutcome::gap)).collect();
    let trend = trend_test(&xs, &ys).ok();
    Ok(CrossoverReport { config: cfg.clone(), levels, trend })
}

impl CrossoverReport {
    pub fn level(&self, p: f64) -> Option<&LevelSummary> {
        self.levels.iter().find(|l| (l.fidelity - p).abs() < 1e-12)
    }

    /// True when every simulation spent exactly the configured budget.
    pub fn budget_parity(&self) -> bool {
        self.levels.iter().flat_map(|l| &l.outcomes).all(|o| {
            o.gradient_evaluations == self.config.eval_budget && o.mcts_evaluations == self.config.eval_budget
        })
    }

    pub fn means_non_decreasing(&self) -> bool {
        self.levels.windows(2).all(|w| w[1].gap_mean >= w[0].gap_mean)
    }

    /// Tab-separated summary, one row per fidelity.
    pub fn to_table(&self) -> String {
        let mut out = String::from("fidelity\tgradient_mean\tgradient_std\tmcts_mean\tmcts_std\tgap_mean\tgap_std\tseeds\n");
        for l in &self.levels {
            let _ = writeln!(
                out,
                "{:.3}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
                l.fidelity, l.gradient_mean, l.gradient_std, l.mcts_mean, l.mcts_std, l.gap_mean, l.gap_std, l.outcomes.len()
            );
        }
        if let Some(t) = &self.trend {
            let _ = writeln!(out, "# trend slope {:.4} t {:.3} df {} one-sided p {:.3e}", t.slope, t.t_stat, t.df, t.p_value);
        }
        out
    }

    /// Whitespace-separated data block for external plotting tools.
    pub fn to_gnuplot(&self) -> String {
        let mut out = String::from("# fidelity gradient gradient_err mcts mcts_err gap gap_err\n");
        for l in &self.levels {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                l.fidelity, l.gradient_mean, l.gradient_std, l.mcts_mean, l.mcts_std, l.gap_mean, l.gap_std
            );
        }
        out
    }
}
