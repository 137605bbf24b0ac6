//! Tabular laboratory for probability squeezing in policy-gradient RL.
//!
//! Policies are exact prefix-conditioned softmax tables, so sequence
//! probabilities, gradients and the mass redistribution caused by a
//! negative update can all be computed in closed form and checked by
//! enumeration. On top of that sit the GRPO/DAPO/GSPO surrogate objectives,
//! path-finding tasks with rule-based validators, the iterative RL/IRL loop
//! with low-likelihood demonstration selection, and evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod irl;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod runner;
pub mod squeeze;

pub use error::{Error, Result};
pub use policy::{softmax, PolicyTable, Prefix, SparseGradient, TokenDistribution, TokenId, Trajectory, Vocab};
