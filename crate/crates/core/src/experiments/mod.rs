//! Metrics over event logs and the synthetic crossover lab.

pub mod lab;
pub mod metrics;

pub use lab::{run_crossover, CrossoverReport, LabConfig, Landscape, LevelSummary, SeedOutcome, StrategyResult};
pub use metrics::{average_ranks, improvement_rate, rejection_rate, spearman_ic, trend_test, Ic, TrendTest};
