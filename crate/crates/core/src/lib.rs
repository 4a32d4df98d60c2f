//! Offline goal-conditioned RL with a policy that emits subgoals before its action.

pub mod autodiff;
pub mod env;
pub mod error;
pub mod harness;
pub mod mixer;
pub mod nn;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod value;

pub use error::{Error, Result};
