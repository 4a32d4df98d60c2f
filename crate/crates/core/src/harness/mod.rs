//! Run plumbing around the trainer: configuration, checkpoints, the
//! diagnostic decoder, ablation sweeps and subgoal visualisation.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod viz;
