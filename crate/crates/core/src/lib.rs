//! Mixed sparsity training of small GPT-style language models.
//!
//! The crate bundles a dense autodiff engine with simulated weight sparsity,
//! the three-phase sparsity schedule, Mixed-Growing topology evolution and its
//! baselines, causal sparse attention patterns, an analytic FLOP accountant,
//! and a deterministic, resumable training loop.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod flops;
pub mod model;
pub mod rng;
pub mod schedules;
pub mod tensor;
pub mod topology;
pub mod trainer;
