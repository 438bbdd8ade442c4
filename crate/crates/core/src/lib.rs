pub mod error;
pub mod model;
pub mod oracle;
pub mod memory;
pub mod executor;
pub mod validation;
pub mod reasoning;
pub mod multitrace;
pub mod mcts;
pub mod experiments;
pub mod persistence;
