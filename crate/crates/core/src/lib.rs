//! Reachability-corrected latent world models for goal-conditioned planning.
//!
//! The crate trains a small latent world model (encoder, residual latent
//! dynamics, budget-conditioned reachability head) with a multi-horizon
//! open-loop prediction loss plus a reachability loss built from
//! trajectory-induced labels, and plans with a categorical CEM planner whose
//! terminal latent cost is gated by trajectory-level reachability. Exact BFS
//! ground truth on the grid mazes makes every label and bound checkable.

pub mod analysis;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod planner;
pub mod train;

pub use error::{Error, Result};
