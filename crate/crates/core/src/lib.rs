//! Exact-oracle laboratory for model-agnostic meta-learning on finite
//! instances: tabular MDPs, energy-based policies, meta-RL and meta-SL with
//! exact gradients, two-layer ReLU networks, and auditors for the
//! optimality-gap bounds of stationary points.

pub mod error;
pub mod fit;
pub mod harness;
pub mod mdp;
pub mod meta_rl;
pub mod meta_sl;
pub mod neural;
pub mod policy;
pub mod rl_audit;
pub mod sl_audit;
pub mod train;

pub use error::{Error, Result};
