//! Analytic training-FLOP accounting for a sparse GPT-style transformer.
//!
//! Only fully-connected layers and the two attention matrix products are
//! counted; embeddings, layer norms, softmax and topology updates are left
//! out. A backward pass costs twice its forward pass.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionPattern, PatternError, PatternFamily};
use crate::schedules::{ScheduleError, SparsityPlan, StrideSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlopError {
    #[error("sparsity {0} outside [0, 1)")]
    Sparsity(f64),
    #[error("attention ratio {0} outside (0, 1]")]
    AttentionRatio(f64),
    #[error("embedding width {n_embd} not divisible by {n_heads} heads")]
    Heads { n_embd: usize, n_heads: usize },
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub seq_len: usize,
    pub n_embd: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffw: usize,
    pub vocab: usize,
}

impl ModelDims {
    pub fn new(
        seq_len: usize,
        n_embd: usize,
        n_layers: usize,
        n_heads: usize,
        vocab: usize,
    ) -> Result<Self, FlopError> {
        if n_heads == 0 || !n_embd.is_multiple_of(n_heads) {
            return Err(FlopError::Heads { n_embd, n_heads });
        }
        Ok(ModelDims { seq_len, n_embd, n_layers, n_heads, d_ffw: 4 * n_embd, vocab })
    }

    pub fn gpt2_small() -> Self {
        ModelDims::new(1024, 768, 12, 12, 50257).expect("valid dims")
    }

    pub fn d_head(&self) -> usize {
        self.n_embd / self.n_heads
    }
}

/// How the attention-weighted sum of values is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReduceRule {
    /// `Q·2·L·L·D_head` per head, i.e. `Q·2·L·L·N_embd` per layer: the same
    /// cost as the score product.
    #[default]
    PerHead,
    /// `Q·2·N_embd·(L·L·D_head)`, which carries an extra `D_head` factor.
    Literal,
}

/// Forward FLOPs per component, already summed over all layers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentFlops {
    pub kqv: f64,
    pub scores: f64,
    pub reduce: f64,
    pub proj: f64,
    pub ffw1: f64,
    pub ffw2: f64,
    pub lm: f64,
}

impl ComponentFlops {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("kqv", self.kqv),
            ("scores", self.scores),
            ("reduce", self.reduce),
            ("proj", self.proj),
            ("ffw1", self.ffw1),
            ("ffw2", self.ffw2),
            ("lm", self.lm),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub components: ComponentFlops,
    pub forward: f64,
    pub backward: f64,
    pub total: f64,
}

impl FlopReport {
    /// Forward FLOPs of all weight-matrix products (`kqv`, `proj`, MLP, head).
    pub fn fully_connected(&self) -> f64 {
        let c = &self.components;
        c.kqv + c.proj + c.ffw1 + c.ffw2 + c.lm
    }

    /// Forward FLOPs of the score and value-reduction products.
    pub fn attention(&self) -> f64 {
        self.components.scores + self.components.reduce
    }

    pub fn fully_connected_fraction(&self) -> f64 {
        self.fully_connected() / self.forward
    }

    pub fn attention_fraction(&self) -> f64 {
        self.attention() / self.forward
    }

    pub fn scaled(&self, k: f64) -> FlopReport {
        let c = &self.components;
        FlopReport {
            components: ComponentFlops {
                kqv: c.kqv * k,
                scores: c.scores * k,
                reduce: c.reduce * k,
                proj: c.proj * k,
                ffw1: c.ffw1 * k,
                ffw2: c.ffw2 * k,
                lm: c.lm * k,
            },
            forward: self.forward * k,
            backward: self.backward * k,
            total: self.total * k,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,forward_flops,fraction\n");
        for (name, v) in self.components.named() {
            s.push_str(&format!("{name},{v},{}\n", v / self.forward));
        }
        s.push_str(&format!("forward,{},1\n", self.forward));
        s.push_str(&format!("backward,{},2\n", self.backward));
        s.push_str(&format!("total,{},3\n", self.total));
        s
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>22} {:>9}", "component", "forward FLOPs", "share")?;
        for (name, v) in self.components.named() {
            writeln!(f, "{:<16} {:>22.0} {:>8.2}%", name, v, 100.0 * v / self.forward)?;
        }
        writeln!(
            f,
            "{:<16} {:>22.0} {:>8.2}%",
            "fully-connected",
            self.fully_connected(),
            100.0 * self.fully_connected_fraction()
        )?;
        writeln!(f, "{:<16} {:>22.0} {:>8.2}%", "attention", self.attention(), 100.0 * self.attention_fraction())?;
        writeln!(f, "{:<16} {:>22.0}", "forward", self.forward)?;
        writeln!(f, "{:<16} {:>22.0}", "backward", self.backward)?;
        write!(f, "{:<16} {:>22.0}", "total", self.total)
    }
}

/// Forward/backward FLOPs of one length-`L` sequence at weight sparsity
/// `sparsity` and attention ratio `q_atten`.
pub fn forward_flops(dims: &ModelDims, sparsity: f64, q_atten: f64, rule: ReduceRule) -> Result<FlopReport, FlopError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(FlopError::Sparsity(sparsity));
    }
    if !(q_atten > 0.0 && q_atten <= 1.0) {
        return Err(FlopError::AttentionRatio(q_atten));
    }
    let density = 1.0 - sparsity;
    let l = dims.seq_len as f64;
    let e = dims.n_embd as f64;
    let f = dims.d_ffw as f64;
    let v = dims.vocab as f64;
    let d = dims.d_head() as f64;
    let depth = dims.n_layers as f64;

    let kqv = density * l * ((2.0 * e - 1.0) * 3.0 * e);
    let scores = q_atten * 2.0 * l * l * e;
    let reduce = match rule {
        ReduceRule::PerHead => q_atten * 2.0 * l * l * d * dims.n_heads as f64,
        ReduceRule::Literal => q_atten * 2.0 * e * (l * l * d),
    };
    let proj = density * l * ((2.0 * e - 1.0) * e);
    let ffw1 = density * l * ((2.0 * e - 1.0) * f);
    let ffw2 = density * l * ((2.0 * f - 1.0) * e);
    let lm = density * l * ((2.0 * e - 1.0) * v);

    let components = ComponentFlops {
        kqv: depth * kqv,
        scores: depth * scores,
        reduce: depth * reduce,
        proj: depth * proj,
        ffw1: depth * ffw1,
        ffw2: depth * ffw2,
        lm,
    };
    let forward = depth * (kqv + scores + reduce + proj + ffw1 + ffw2) + lm;
    let backward = 2.0 * forward;
    Ok(FlopReport { components, forward, backward, total: forward + backward })
}

/// Everything needed to account the FLOPs of each training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopSchedule {
    pub dims: ModelDims,
    pub plan: SparsityPlan,
    pub stride: StrideSchedule,
    pub family: PatternFamily,
    pub summary: usize,
    pub update_interval: u64,
    /// Masks are never updated after initialization.
    pub static_topology: bool,
    pub sequences_per_step: u64,
    pub rule: ReduceRule,
}

impl FlopSchedule {
    /// Sparsity the step-`t` forward pass runs at: masks come from the last
    /// topology update strictly before `t` (or initialization).
    pub fn accounted_sparsity(&self, t: u64) -> Result<f64, FlopError> {
        let u = if self.static_topology || t == 0 {
            0
        } else {
            let last = (t - 1).min(self.plan.update_horizon());
            last / self.update_interval.max(1) * self.update_interval.max(1)
        };
        Ok(self.plan.sparsity_at(u)?)
    }

    pub fn pattern_at(&self, t: u64) -> Result<AttentionPattern, FlopError> {
        let stride = self.stride.stride_at(t);
        Ok(AttentionPattern::for_stride(self.family, self.dims.seq_len, stride, self.summary)?)
    }

    /// Training FLOPs (forward + backward) of step `t`.
    pub fn step_flops(&self, t: u64, q_sparse: f64) -> Result<f64, FlopError> {
        let q = if self.stride.stride_at(t) == 1 { 1.0 } else { q_sparse };
        let s = self.accounted_sparsity(t)?;
        Ok(forward_flops(&self.dims, s, q, self.rule)?.total * self.sequences_per_step as f64)
    }

    /// Attention ratio of the sparse (pre-switch) pattern.
    pub fn sparse_q(&self) -> Result<f64, FlopError> {
        let stride = self.stride.stride.max(1);
        Ok(AttentionPattern::for_stride(self.family, self.dims.seq_len, stride, self.summary)?.q_atten())
    }

    /// Same model, dense weights and dense attention throughout.
    pub fn dense_reference(&self) -> FlopSchedule {
        FlopSchedule {
            plan: self.plan.with_kind(crate::schedules::PlanKind::Dense),
            stride: StrideSchedule { stride: 1, dense_from: 0 },
            static_topology: true,
            ..self.clone()
        }
    }
}

/// Running cumulative FLOP counter used by the trainer.
#[derive(Debug, Clone)]
pub struct FlopCounter {
    schedule: FlopSchedule,
    q_sparse: f64,
}

impl FlopCounter {
    pub fn new(schedule: FlopSchedule) -> Result<Self, FlopError> {
        let q_sparse = schedule.sparse_q()?;
        Ok(FlopCounter { schedule, q_sparse })
    }

    pub fn step(&self, t: u64) -> Result<f64, FlopError> {
        self.schedule.step_flops(t, self.q_sparse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingFlops {
    pub total: f64,
    pub dense_total: f64,
}

impl TrainingFlops {
    /// Dense FLOPs divided by scheduled FLOPs.
    pub fn reduction(&self) -> f64 {
        self.dense_total / self.total
    }

    pub fn fraction_of_dense(&self) -> f64 {
        self.total / self.dense_total
    }
}

/// Sums step FLOPs over `0..steps` for the schedule and its dense reference.
pub fn training_flops(schedule: &FlopSchedule, steps: u64) -> Result<TrainingFlops, FlopError> {
    let sum = |s: &FlopSchedule| -> Result<f64, FlopError> {
        let counter = FlopCounter::new(s.clone())?;
        let mut acc = 0.0;
        for t in 0..steps {
            acc += counter.step(t)?;
        }
        Ok(acc)
    };
    Ok(TrainingFlops { total: sum(schedule)?, dense_total: sum(&schedule.dense_reference())? })
}
