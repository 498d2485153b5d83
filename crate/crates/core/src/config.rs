//! Flat TOML run configuration. Every key is optional and defaults to the
//! GPT-2-small recipe; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionPattern, PatternFamily};
use crate::data::TokenizerKind;
use crate::flops::{FlopSchedule, ModelDims, ReduceRule};
use crate::model::ModelConfig;
use crate::schedules::{LrSchedule, PhaseConfig, PlanKind, SparsityPlan, StrideSchedule, ZetaSchedule, ZetaVariant};
use crate::tensor::AdamWConfig;
use crate::topology::{EvolutionScheme, SchemeKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_embd: usize,
    pub block_size: usize,
    /// Overrides the corpus vocabulary (must be at least as large).
    pub vocab_size: Option<usize>,
    pub tie_embeddings: bool,
    pub mask_lm_head: bool,
    pub precision: Precision,

    // optimizer
    pub learning_rate: f64,
    pub min_lr: f64,
    pub warmup_iters: u64,
    pub lr_decay_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global-norm threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub grad_accum: usize,

    // sparsity variation
    pub max_sparsity: f64,
    pub stages: u32,
    pub prune_interval: u64,
    pub ultra_steps: u64,
    pub grow_interval: u64,
    pub sparsity_plan: PlanKind,
    /// SD switch step; defaults to half the run.
    pub sd_switch: Option<u64>,
    /// DSD sparse window; defaults to the end of warm-up...
    pub dsd_sparse_from: Option<u64>,
    /// ...and the start of restoration.
    pub dsd_dense_from: Option<u64>,
    /// GD decrements; defaults to `stages`.
    pub gd_stages: Option<u32>,

    // topology evolution
    pub evolution_scheme: SchemeKind,
    pub zeta: f64,
    pub zeta_variant: ZetaVariant,
    pub zeta_decay_ratio: f64,
    pub update_interval: u64,
    pub random_ratio: f64,
    pub mest_lambda: f64,

    // attention
    pub attention_pattern: PatternFamily,
    pub stride: usize,
    pub fixed_summary: usize,
    /// First dense-attention step; defaults to the start of restoration.
    pub dense_attention_step: Option<u64>,

    // accounting
    pub reduce_rule: ReduceRule,

    // data and run
    pub data_path: PathBuf,
    pub tokenizer: TokenizerKind,
    pub val_fraction: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub eval_batches: usize,
    pub checkpoint_interval: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_layers: 12,
            n_heads: 12,
            n_embd: 768,
            block_size: 1024,
            vocab_size: None,
            tie_embeddings: true,
            mask_lm_head: true,
            precision: Precision::F32,
            learning_rate: 6e-4,
            min_lr: 6e-5,
            warmup_iters: 2000,
            lr_decay_iters: 140_000,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 0.1,
            total_iters: 140_000,
            batch_size: 12,
            grad_accum: 1,
            max_sparsity: 0.96,
            stages: 5,
            prune_interval: 2000,
            ultra_steps: 100_000,
            grow_interval: 2000,
            sparsity_plan: PlanKind::Sv,
            sd_switch: None,
            dsd_sparse_from: None,
            dsd_dense_from: None,
            gd_stages: None,
            evolution_scheme: SchemeKind::Mg,
            zeta: 0.3,
            zeta_variant: ZetaVariant::DecayNCosine,
            zeta_decay_ratio: 0.5,
            update_interval: 100,
            random_ratio: 0.25,
            mest_lambda: 1.0,
            attention_pattern: PatternFamily::Strided,
            stride: 256,
            fixed_summary: 1,
            dense_attention_step: None,
            reduce_rule: ReduceRule::PerHead,
            data_path: PathBuf::from("data/input.txt"),
            tokenizer: TokenizerKind::Char,
            val_fraction: 0.1,
            seed: 1337,
            eval_interval: 500,
            eval_batches: 20,
            checkpoint_interval: 1000,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn phase(&self) -> PhaseConfig {
        PhaseConfig {
            max_sparsity: self.max_sparsity,
            stages: self.stages,
            prune_interval: self.prune_interval,
            ultra_steps: self.ultra_steps,
            grow_interval: self.grow_interval,
        }
    }

    pub fn plan(&self) -> SparsityPlan {
        let mut plan = SparsityPlan::sv(self.phase(), self.total_iters).with_kind(self.sparsity_plan);
        if let Some(v) = self.sd_switch {
            plan.sd_switch = v;
        }
        if let Some(v) = self.dsd_sparse_from {
            plan.dsd_sparse_from = v;
        }
        if let Some(v) = self.dsd_dense_from {
            plan.dsd_dense_from = v;
        }
        if let Some(v) = self.gd_stages {
            plan.gd_stages = v;
        }
        plan
    }

    pub fn zeta_schedule(&self) -> ZetaSchedule {
        ZetaSchedule::new(self.zeta_variant, self.zeta, &self.phase(), self.zeta_decay_ratio)
    }

    pub fn stride_schedule(&self) -> StrideSchedule {
        let dense_from = self.dense_attention_step.unwrap_or_else(|| self.phase().restoration_start());
        StrideSchedule { stride: self.stride, dense_from }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.learning_rate,
            min: self.min_lr,
            warmup_steps: self.warmup_iters,
            decay_steps: self.lr_decay_iters,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn scheme(&self) -> EvolutionScheme {
        EvolutionScheme { kind: self.evolution_scheme, random_ratio: self.random_ratio, mest_lambda: self.mest_lambda }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_embd: self.n_embd,
            block_size: self.block_size,
            vocab_size,
            tie_embeddings: self.tie_embeddings,
            mask_lm_head: self.mask_lm_head,
        }
    }

    pub fn sequences_per_step(&self) -> u64 {
        (self.batch_size * self.grad_accum) as u64
    }

    pub fn pattern_at(&self, t: u64) -> Result<AttentionPattern, ConfigError> {
        let stride = self.stride_schedule().stride_at(t);
        AttentionPattern::for_stride(self.attention_pattern, self.block_size, stride, self.fixed_summary)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// FLOP accounting schedule; `vocab` is the model's vocabulary.
    pub fn flop_schedule(&self, vocab: usize) -> Result<FlopSchedule, ConfigError> {
        let dims = ModelDims::new(self.block_size, self.n_embd, self.n_layers, self.n_heads, vocab)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(FlopSchedule {
            dims,
            plan: self.plan(),
            stride: self.stride_schedule(),
            family: self.attention_pattern,
            summary: self.fixed_summary,
            update_interval: self.update_interval,
            static_topology: self.evolution_scheme == SchemeKind::Static,
            sequences_per_step: self.sequences_per_step(),
            rule: self.reduce_rule,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.n_embd == 0 || self.block_size == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.n_embd.is_multiple_of(self.n_heads) {
            return bad(format!("n_embd {} is not divisible by n_heads {}", self.n_embd, self.n_heads));
        }
        if self.total_iters == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return bad("total_iters, batch_size and grad_accum must be positive".into());
        }
        if !self.learning_rate.is_finite()
            || self.learning_rate <= 0.0
            || self.min_lr < 0.0
            || self.min_lr > self.learning_rate
        {
            return bad("need 0 <= min_lr <= learning_rate and learning_rate > 0".into());
        }
        if self.lr_decay_iters < self.warmup_iters {
            return bad("lr_decay_iters precedes the end of warmup".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !self.adam_eps.is_finite()
            || self.adam_eps <= 0.0
        {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.zeta) || !(self.zeta_decay_ratio > 0.0 && self.zeta_decay_ratio <= 1.0) {
            return bad("zeta must lie in [0, 1] and zeta_decay_ratio in (0, 1]".into());
        }
        if self.update_interval == 0 {
            return bad("update_interval must be positive".into());
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if self.eval_interval == 0 || self.eval_batches == 0 || self.checkpoint_interval == 0 {
            return bad("eval_interval, eval_batches and checkpoint_interval must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} must lie in (0, 1)", self.val_fraction));
        }
        self.scheme().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let phase = self.phase();
        phase.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sparsity_plan == PlanKind::Sv && phase.end() > self.total_iters {
            return bad(format!(
                "sparsity variation ends at step {} beyond total_iters {}",
                phase.end(),
                self.total_iters
            ));
        }
        self.plan().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, v) in [
            ("sd_switch", self.sd_switch),
            ("dsd_sparse_from", self.dsd_sparse_from),
            ("dsd_dense_from", self.dsd_dense_from),
        ] {
            if v.is_some_and(|v| v > self.total_iters) {
                return bad(format!("{name} lies beyond total_iters"));
            }
        }
        if self.dense_attention_step.is_some_and(|d| d > self.total_iters) {
            return bad("dense_attention_step lies beyond total_iters".into());
        }
        if self.attention_pattern == PatternFamily::Fixed && self.stride > 1 && self.fixed_summary >= self.stride {
            return bad(format!("fixed_summary {} must be below stride {}", self.fixed_summary, self.stride));
        }
        Ok(())
    }
}
