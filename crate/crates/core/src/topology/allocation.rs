//! Erdős–Rényi layer-wise sparsity allocation.

use serde::{Deserialize, Serialize};

use super::{LayerMask, TopologyError};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityAllocation {
    pub target: f64,
    pub shapes: Vec<(usize, usize)>,
    /// Per-layer sparsity `s_l`.
    pub sparsities: Vec<f64>,
}

impl SparsityAllocation {
    pub fn density(&self, layer: usize) -> f64 {
        1.0 - self.sparsities[layer]
    }

    /// Integer number of active weights the layer should hold.
    pub fn active_count(&self, layer: usize) -> usize {
        let (r, c) = self.shapes[layer];
        target_active(self.sparsities[layer], r * c)
    }

    pub fn total_active(&self) -> usize {
        (0..self.shapes.len()).map(|l| self.active_count(l)).sum()
    }
}

/// `round((1 − s)·n)`.
pub fn target_active(sparsity: f64, n: usize) -> usize {
    (((1.0 - sparsity) * n as f64).round() as usize).min(n)
}

/// Density per layer proportional to `(rows+cols)/(rows·cols)`, scaled so the
/// total number of active weights is `(1−target)·Σ N_l`. Layers whose density
/// would exceed one are pinned dense and the scale re-solved on the rest.
pub fn er_allocate(target: f64, shapes: &[(usize, usize)]) -> Result<SparsityAllocation, TopologyError> {
    if !(0.0..1.0).contains(&target) {
        return Err(TopologyError::SparsityRange(target));
    }
    if shapes.iter().any(|&(r, c)| r == 0 || c == 0) {
        return Err(TopologyError::Shape("zero-sized layer".into()));
    }
    let total: f64 = shapes.iter().map(|&(r, c)| (r * c) as f64).sum();
    let budget = (1.0 - target) * total;
    let mut dense = vec![false; shapes.len()];
    let mut densities = vec![1.0; shapes.len()];
    loop {
        let pinned: f64 = shapes.iter().zip(&dense).filter(|(_, &d)| d).map(|(&(r, c), _)| (r * c) as f64).sum();
        let remaining = budget - pinned;
        // Σ over free layers of raw_l·N_l, with raw_l·N_l = rows + cols.
        let weight: f64 = shapes.iter().zip(&dense).filter(|(_, &d)| !d).map(|(&(r, c), _)| (r + c) as f64).sum();
        if weight == 0.0 {
            if remaining.abs() <= 1e-9 * total.max(1.0) {
                break;
            }
            return Err(TopologyError::Infeasible { target });
        }
        let scale = remaining / weight;
        let mut changed = false;
        for (l, &(r, c)) in shapes.iter().enumerate() {
            if dense[l] {
                continue;
            }
            let d = scale * (r + c) as f64 / (r * c) as f64;
            if d > 1.0 {
                dense[l] = true;
                densities[l] = 1.0;
                changed = true;
            } else {
                densities[l] = d;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(SparsityAllocation {
        target,
        shapes: shapes.to_vec(),
        sparsities: densities.iter().map(|d| (1.0 - d).max(0.0)).collect(),
    })
}

/// Uniformly random active sets matching each layer's allocated count.
pub fn init_masks(alloc: &SparsityAllocation, rng: &mut Rng) -> Vec<LayerMask> {
    alloc
        .shapes
        .iter()
        .enumerate()
        .map(|(l, &(r, c))| {
            let k = alloc.active_count(l);
            if k == r * c {
                LayerMask::full(l, r, c)
            } else {
                LayerMask::from_active(l, r, c, rng.sample_indices(r * c, k))
            }
        })
        .collect()
}
