//! Prune-and-grow topology updates: Mixed-Growing and the SET / RigL / MEST
//! / static baselines, which differ only in their prune score and in how the
//! growth budget splits between gradient-ranked and random picks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::allocation::{er_allocate, target_active};
use super::{LayerMask, TopologyError};
use crate::rng::Rng;
use crate::schedules::{SparsityPlan, ZetaSchedule};
use crate::tensor::{Moments, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Static,
    Set,
    Rigl,
    Mest,
    Mg,
}

impl FromStr for SchemeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(SchemeKind::Static),
            "set" => Ok(SchemeKind::Set),
            "rigl" => Ok(SchemeKind::Rigl),
            "mest" => Ok(SchemeKind::Mest),
            "mg" | "mixed-growing" => Ok(SchemeKind::Mg),
            other => Err(format!("unknown evolution scheme `{other}`")),
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SchemeKind::Static => "static",
            SchemeKind::Set => "set",
            SchemeKind::Rigl => "rigl",
            SchemeKind::Mest => "mest",
            SchemeKind::Mg => "mg",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionScheme {
    pub kind: SchemeKind,
    /// Share of grown connections picked at random (MG only).
    pub random_ratio: f64,
    /// Gradient coefficient in MEST's prune score.
    pub mest_lambda: f64,
}

impl EvolutionScheme {
    pub fn mixed_growing(random_ratio: f64) -> Self {
        EvolutionScheme { kind: SchemeKind::Mg, random_ratio, mest_lambda: 0.0 }
    }

    pub fn of(kind: SchemeKind) -> Self {
        EvolutionScheme { kind, random_ratio: 0.25, mest_lambda: 0.0 }
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if !(0.0..=1.0).contains(&self.random_ratio) {
            return Err(TopologyError::Ratio(self.random_ratio));
        }
        if !self.mest_lambda.is_finite() || self.mest_lambda < 0.0 {
            return Err(TopologyError::Ratio(self.mest_lambda));
        }
        Ok(())
    }

    /// `(gradient weight in the prune score, random share of growth)`.
    fn rule(&self) -> Option<(f64, f64)> {
        match self.kind {
            SchemeKind::Static => None,
            SchemeKind::Set => Some((0.0, 1.0)),
            SchemeKind::Rigl => Some((0.0, 0.0)),
            SchemeKind::Mest => Some((self.mest_lambda, 1.0)),
            SchemeKind::Mg => Some((0.0, self.random_ratio)),
        }
    }
}

/// Mutable view of one maskable layer during a topology update.
pub struct LayerView<'a, T> {
    pub weights: &'a mut [T],
    /// Dense gradient, defined at inactive positions too.
    pub grads: &'a [T],
    pub moments: &'a mut Moments<T>,
    pub mask: &'a mut LayerMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepCounts {
    pub n_prune: usize,
    pub n_grow: usize,
    pub n_rand: usize,
    pub n_grad: usize,
}

/// Prune/grow budget for one layer.
///
/// `n_prune = round(ζ·active)`, `n_grow = n_prune + (target − active)` so the
/// layer lands on its target count. A negative growth budget turns into
/// extra pruning; growth beyond the inactive slots shrinks both sides.
pub fn plan_counts(active: usize, total: usize, target: usize, zeta: f64, random_ratio: f64) -> StepCounts {
    let inactive = (total - active) as i64;
    let mut n_prune = (zeta * active as f64).round() as i64;
    let mut n_grow = n_prune + target as i64 - active as i64;
    if n_grow < 0 {
        n_prune -= n_grow;
        n_grow = 0;
    }
    if n_grow > inactive {
        let excess = n_grow - inactive;
        n_grow -= excess;
        n_prune -= excess;
    }
    let n_grow = n_grow as usize;
    let n_rand = (n_grow as f64 * random_ratio).floor() as usize;
    StepCounts { n_prune: n_prune.max(0) as usize, n_grow, n_rand, n_grad: n_grow - n_rand }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEvolution {
    pub layer: usize,
    pub counts: StepCounts,
    pub pruned: Vec<usize>,
    pub grown_grad: Vec<usize>,
    pub grown_rand: Vec<usize>,
    pub sparsity_before: f64,
    pub sparsity_after: f64,
    /// Connections that could not be grown for lack of candidates.
    pub shortfall: usize,
}

/// `ArgTopK` of `scores` over `candidates`, largest first, ties by lowest index.
fn top_k(candidates: &mut [(f64, usize)], k: usize) -> Vec<usize> {
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
    }
    let head = &mut candidates[..k];
    head.sort_unstable_by(cmp);
    head.iter().map(|&(_, i)| i).collect()
}

fn evolve<T: Scalar>(
    layer: LayerView<'_, T>,
    target_sparsity: f64,
    zeta: f64,
    grad_weight: f64,
    random_ratio: f64,
    rng: &mut Rng,
) -> Result<LayerEvolution, TopologyError> {
    let LayerView { weights, grads, moments, mask } = layer;
    let n = mask.len();
    if weights.len() != n || grads.len() != n || moments.m.len() != n {
        return Err(TopologyError::Shape(format!(
            "layer {}: mask {n}, weights {}, grads {}",
            mask.layer(),
            weights.len(),
            grads.len()
        )));
    }
    if !(0.0..=1.0).contains(&zeta) {
        return Err(TopologyError::Ratio(zeta));
    }
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(TopologyError::SparsityRange(target_sparsity));
    }
    let sparsity_before = mask.sparsity();
    let active = mask.active_count();
    let target = target_active(target_sparsity, n);
    let counts = plan_counts(active, n, target, zeta, random_ratio);

    // Prune: smallest score among active positions.
    let mut scored: Vec<(f64, usize)> = mask
        .iter_active()
        .map(|i| {
            let s = weights[i].abs().to_f64_lossy() + grad_weight * grads[i].abs().to_f64_lossy();
            (-s, i)
        })
        .collect();
    let pruned = top_k(&mut scored, counts.n_prune);

    // Grow from positions inactive at step start only.
    let mut candidates: Vec<(f64, usize)> = mask.iter_inactive().map(|i| (grads[i].abs().to_f64_lossy(), i)).collect();
    let n_grad = counts.n_grad.min(candidates.len());
    let grown_grad = top_k(&mut candidates, n_grad);
    let mut taken = vec![false; n];
    for &i in &grown_grad {
        taken[i] = true;
    }
    let rest: Vec<usize> = mask.iter_inactive().filter(|&i| !taken[i]).collect();
    let want_rand = counts.n_rand + (counts.n_grad - n_grad);
    let n_rand = want_rand.min(rest.len());
    let mut grown_rand: Vec<usize> = rng.sample_indices(rest.len(), n_rand).into_iter().map(|j| rest[j]).collect();
    grown_rand.sort_unstable();
    let shortfall = want_rand - n_rand;

    for &i in &pruned {
        mask.set(i, false);
        weights[i] = T::zero();
        moments.reset(i);
    }
    for &i in grown_grad.iter().chain(&grown_rand) {
        mask.set(i, true);
        weights[i] = T::zero();
        moments.reset(i);
    }
    mask.apply(weights);

    Ok(LayerEvolution {
        layer: mask.layer(),
        counts: StepCounts { n_rand: grown_rand.len(), n_grad: grown_grad.len(), ..counts },
        pruned,
        grown_grad,
        grown_rand,
        sparsity_before,
        sparsity_after: mask.sparsity(),
        shortfall,
    })
}

/// One Mixed-Growing update of a single layer.
pub fn mg_step<T: Scalar>(
    layer: LayerView<'_, T>,
    target_sparsity: f64,
    zeta: f64,
    random_ratio: f64,
    rng: &mut Rng,
) -> Result<LayerEvolution, TopologyError> {
    if !(0.0..=1.0).contains(&random_ratio) {
        return Err(TopologyError::Ratio(random_ratio));
    }
    evolve(layer, target_sparsity, zeta, 0.0, random_ratio, rng)
}

/// One update of a single layer under any scheme. `Static` leaves the layer
/// untouched.
pub fn baseline_step<T: Scalar>(
    scheme: &EvolutionScheme,
    layer: LayerView<'_, T>,
    target_sparsity: f64,
    zeta: f64,
    rng: &mut Rng,
) -> Result<LayerEvolution, TopologyError> {
    scheme.validate()?;
    match scheme.rule() {
        Some((grad_weight, random_ratio)) => evolve(layer, target_sparsity, zeta, grad_weight, random_ratio, rng),
        None => {
            let s = layer.mask.sparsity();
            Ok(LayerEvolution {
                layer: layer.mask.layer(),
                counts: StepCounts::default(),
                pruned: Vec::new(),
                grown_grad: Vec::new(),
                grown_rand: Vec::new(),
                sparsity_before: s,
                sparsity_after: s,
                shortfall: 0,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRecord {
    pub step: u64,
    pub target_sparsity: f64,
    pub zeta: f64,
    pub realized_sparsity: f64,
    pub layers: Vec<LayerEvolution>,
}

pub const EVOLUTION_LOG_HEADER: &str = "step,layer,n_prune,n_grow,n_rand,n_grad,sparsity_before,sparsity_after";

impl EvolutionRecord {
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.step,
                l.layer,
                l.counts.n_prune,
                l.counts.n_grow,
                l.counts.n_rand,
                l.counts.n_grad,
                l.sparsity_before,
                l.sparsity_after
            ));
        }
        out
    }
}

/// Global sparsity `1 − Σ active / Σ N` over a set of masks.
pub fn global_sparsity<'a>(masks: impl IntoIterator<Item = &'a LayerMask>) -> f64 {
    let (active, total) = masks.into_iter().fold((0usize, 0usize), |(a, t), m| (a + m.active_count(), t + m.len()));
    if total == 0 {
        0.0
    } else {
        1.0 - active as f64 / total as f64
    }
}

/// Topology update across all maskable layers at step `t`: evaluate the plan
/// and ζ schedule, split the global target with Erdős–Rényi, update each
/// layer in order with the shared stream.
pub fn global_evolve<T: Scalar>(
    layers: Vec<LayerView<'_, T>>,
    t: u64,
    plan: &SparsityPlan,
    zeta: &ZetaSchedule,
    scheme: &EvolutionScheme,
    rng: &mut Rng,
) -> Result<EvolutionRecord, TopologyError> {
    let target = plan.sparsity_at(t).map_err(TopologyError::Schedule)?;
    let z = zeta.zeta(t);
    let shapes: Vec<(usize, usize)> = layers.iter().map(|l| (l.mask.rows(), l.mask.cols())).collect();
    let alloc = er_allocate(target, &shapes)?;
    let mut records = Vec::with_capacity(layers.len());
    let mut active = 0usize;
    let mut total = 0usize;
    for (l, view) in layers.into_iter().enumerate() {
        let rec = baseline_step(scheme, view, alloc.sparsities[l], z, rng)?;
        let n = shapes[l].0 * shapes[l].1;
        total += n;
        active += n - (rec.sparsity_after * n as f64).round() as usize;
        records.push(rec);
    }
    Ok(EvolutionRecord {
        step: t,
        target_sparsity: target,
        zeta: z,
        realized_sparsity: 1.0 - active as f64 / total.max(1) as f64,
        layers: records,
    })
}
