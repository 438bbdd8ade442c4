//! PUCT tree search over solutions.

mod run;
mod tree;

use serde::{Deserialize, Serialize};

pub use run::{mcts_header, mcts_run, MctsOutcome};
pub use tree::{puct_score, reward, EdgeStats, RewardMode, Tree, TreeNode};

/// Search parameters, also written to the log header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsSettings {
    pub c_puct: f64,
    pub expand_k: usize,
    pub max_depth: u32,
    pub reward: RewardMode,
    /// Stop once an accepted node reaches this score.
    pub early_stop: Option<f64>,
}

impl Default for MctsSettings {
    fn default() -> Self {
        Self { c_puct: 1.0, expand_k: 3, max_depth: 10, reward: RewardMode::Score, early_stop: None }
    }
}

impl From<&crate::multitrace::RunConfig> for MctsSettings {
    fn from(cfg: &crate::multitrace::RunConfig) -> Self {
        Self {
            c_puct: cfg.c_puct,
            expand_k: cfg.expand_k,
            max_depth: cfg.max_depth,
            reward: cfg.reward,
            early_stop: cfg.early_stop_score,
        }
    }
}
