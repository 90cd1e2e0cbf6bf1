//! Tabular policy-optimization lab.
//!
//! Clipped-surrogate objectives (PPO, GRPO, DAPO, CISPO, GSPO and the
//! gradient-preserving CE-GPPO) on exact softmax policies, with
//! finite-difference gradient checks, an executable entropy-change predictor
//! and a seeded trainer on a verifiable-reward sequence task.

pub mod advantage;
pub mod env;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod suite;
pub mod trainer;

pub use error::{LabError, Result};
