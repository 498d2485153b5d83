//! Sparse topology: layer masks, Erdős–Rényi allocation and prune/grow
//! evolution schemes.

mod allocation;
mod evolve;
mod mask;

pub use allocation::{er_allocate, init_masks, target_active, SparsityAllocation};
pub use evolve::{
    baseline_step, global_evolve, global_sparsity, mg_step, plan_counts, EvolutionRecord, EvolutionScheme,
    LayerEvolution, LayerView, SchemeKind, StepCounts, EVOLUTION_LOG_HEADER,
};
pub use mask::LayerMask;

use thiserror::Error;

use crate::schedules::ScheduleError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("sparsity {0} outside [0, 1)")]
    SparsityRange(f64),
    #[error("ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error("target sparsity {target} is infeasible for the layer set")]
    Infeasible { target: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}
