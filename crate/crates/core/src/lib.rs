//! Mastery-conditioned constrained policy optimization for simulated tutoring.
//!
//! The crate is organized bottom-up:
//!
//! * [`feasibility`]: prerequisite graphs, feasible sets, frontiers.
//! * [`envs`]: the tutoring CMDPs.
//! * [`policy`]: masked softmax, frontier mixing, post-hoc filters.
//! * [`neural`]: MLP with exact backprop, Adam, GAE.
//! * [`train`]: REINFORCE, PPO and their primal-dual variants.
//! * [`metrics`]: returns, RHSI, constraint checks, Welch t, Cohen's d.
//! * [`harness`]: configs, suites, persistence, reports.

pub mod envs;
pub mod error;
pub mod feasibility;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod policy;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
