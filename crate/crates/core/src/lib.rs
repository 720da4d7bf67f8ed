//! Adaptive omission of thoughts and observations for multi-turn agents.
//!
//! The crate provides a token accounting model for agent trajectories, three
//! toy environments with scripted experts, a small factorized policy over
//! per-turn decisions, and the analysis, data synthesis and reinforcement
//! learning loops built on top of them.

pub mod env;
pub mod render;
pub mod rng;
pub mod tokenizer;
pub mod trajectory;
pub mod policy;
pub mod rollout;
pub mod rl;
pub mod synthesis;
pub mod analysis;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
