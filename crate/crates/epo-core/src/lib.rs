//! Multi-turn reinforcement learning for strategist policies.
//!
//! A trainable strategist proposes a short strategy each turn; a frozen actor
//! turns the strategy into concrete behavior inside a simulated environment.
//! Episodes are recorded as trajectories, labeled with per-turn process
//! rewards, and fed back into a REINFORCE update over the strategist — either
//! in single runs or in an iterative self-play loop.

pub mod actor;
pub mod chat;
pub mod cli;
pub mod envs;
pub mod eval;
pub mod model;
pub mod policy;
pub mod prompts;
pub mod reward;
pub mod rollout;
pub mod store;
pub mod train;
