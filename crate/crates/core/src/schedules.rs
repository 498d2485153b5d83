//! Time-varying scalars of a run: global sparsity, topology update fraction
//! ζ, attention stride and learning rate. All are pure functions of the step
//! and their configuration.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("step {t} outside [0, {total}]")]
    StepRange { t: u64, total: u64 },
    #[error("invalid schedule parameter: {0}")]
    Invalid(String),
}

/// Three-phase sparsity variation: cubic warm-up to `max_sparsity` over
/// `stages` pruning rounds, a flat ultra-sparse stretch, and a mirrored cubic
/// restoration back to dense.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub max_sparsity: f64,
    pub stages: u32,
    pub prune_interval: u64,
    pub ultra_steps: u64,
    pub grow_interval: u64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig { max_sparsity: 0.96, stages: 5, prune_interval: 2000, ultra_steps: 100_000, grow_interval: 2000 }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(0.0..1.0).contains(&self.max_sparsity) {
            return Err(ScheduleError::Invalid(format!("max sparsity {} outside [0, 1)", self.max_sparsity)));
        }
        if self.stages == 0 || self.prune_interval == 0 || self.grow_interval == 0 {
            return Err(ScheduleError::Invalid("stages and intervals must be positive".into()));
        }
        Ok(())
    }

    /// `T_W = N·Δ_W`
    pub fn warmup_steps(&self) -> u64 {
        self.stages as u64 * self.prune_interval
    }

    /// `T_R = N·Δ_R`
    pub fn restoration_steps(&self) -> u64 {
        self.stages as u64 * self.grow_interval
    }

    /// First step of restoration, `T_W + T_U`.
    pub fn restoration_start(&self) -> u64 {
        self.warmup_steps() + self.ultra_steps
    }

    /// `T_W + T_U + T_R`
    pub fn end(&self) -> u64 {
        self.restoration_start() + self.restoration_steps()
    }

    /// Sparsity at step `t`; zero after the restoration phase.
    pub fn sparsity(&self, t: u64) -> f64 {
        let n = self.stages as f64;
        let sm = self.max_sparsity;
        if t <= self.warmup_steps() {
            let k = (t / self.prune_interval).min(self.stages as u64) as f64;
            let remaining = 1.0 - k / n;
            sm * (1.0 - remaining * remaining * remaining)
        } else if t <= self.restoration_start() {
            sm
        } else if t <= self.end() {
            let k = ((t - self.restoration_start()) / self.grow_interval).min(self.stages as u64) as f64;
            let remaining = 1.0 - k / n;
            sm * remaining * remaining * remaining
        } else {
            0.0
        }
    }
}

/// `sv_sparsity(t)` with the range check against the run length.
pub fn sv_sparsity(t: u64, cfg: &PhaseConfig, total_steps: u64) -> Result<f64, ScheduleError> {
    if t > total_steps {
        return Err(ScheduleError::StepRange { t, total: total_steps });
    }
    Ok(cfg.sparsity(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    Sv,
    Dense,
    Sparse,
    Sd,
    Dsd,
    Gd,
}

impl FromStr for PlanKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sv" => Ok(PlanKind::Sv),
            "dense" => Ok(PlanKind::Dense),
            "sparse" => Ok(PlanKind::Sparse),
            "sd" => Ok(PlanKind::Sd),
            "dsd" => Ok(PlanKind::Dsd),
            "gd" => Ok(PlanKind::Gd),
            other => Err(format!("unknown sparsity plan `{other}`")),
        }
    }
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PlanKind::Sv => "sv",
            PlanKind::Dense => "dense",
            PlanKind::Sparse => "sparse",
            PlanKind::Sd => "sd",
            PlanKind::Dsd => "dsd",
            PlanKind::Gd => "gd",
        };
        f.write_str(s)
    }
}

/// Target global sparsity over a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub kind: PlanKind,
    pub phase: PhaseConfig,
    pub total_steps: u64,
    /// SD: sparse before this step, dense from it on.
    pub sd_switch: u64,
    /// DSD: dense before this step...
    pub dsd_sparse_from: u64,
    /// ...sparse until this step, dense afterwards.
    pub dsd_dense_from: u64,
    /// GD: number of equal decrements from `max_sparsity` to zero.
    pub gd_stages: u32,
}

impl SparsityPlan {
    pub fn sv(phase: PhaseConfig, total_steps: u64) -> Self {
        SparsityPlan {
            kind: PlanKind::Sv,
            phase,
            total_steps,
            sd_switch: total_steps / 2,
            dsd_sparse_from: phase.warmup_steps(),
            dsd_dense_from: phase.restoration_start(),
            gd_stages: phase.stages,
        }
    }

    pub fn with_kind(mut self, kind: PlanKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        self.phase.validate()?;
        match self.kind {
            PlanKind::Sv if self.phase.end() > self.total_steps => Err(ScheduleError::Invalid(format!(
                "sparsity variation ends at {} beyond the run length {}",
                self.phase.end(),
                self.total_steps
            ))),
            PlanKind::Dsd if self.dsd_sparse_from > self.dsd_dense_from => {
                Err(ScheduleError::Invalid("DSD sparse window ends before it starts".into()))
            }
            PlanKind::Gd if self.gd_stages == 0 => Err(ScheduleError::Invalid("GD needs at least one stage".into())),
            _ => Ok(()),
        }
    }

    pub fn sparsity_at(&self, t: u64) -> Result<f64, ScheduleError> {
        if t > self.total_steps {
            return Err(ScheduleError::StepRange { t, total: self.total_steps });
        }
        let sm = self.phase.max_sparsity;
        Ok(match self.kind {
            PlanKind::Sv => self.phase.sparsity(t),
            PlanKind::Dense => 0.0,
            PlanKind::Sparse => sm,
            PlanKind::Sd => {
                if t < self.sd_switch {
                    sm
                } else {
                    0.0
                }
            }
            PlanKind::Dsd => {
                if t >= self.dsd_sparse_from && t < self.dsd_dense_from {
                    sm
                } else {
                    0.0
                }
            }
            PlanKind::Gd => {
                let stages = self.gd_stages as u64;
                let k = (t * stages / self.total_steps.max(1)).min(stages);
                sm * (1.0 - k as f64 / stages as f64)
            }
        })
    }

    /// Last step at which topology updates run.
    pub fn update_horizon(&self) -> u64 {
        match self.kind {
            PlanKind::Sv => self.phase.end(),
            _ => self.total_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZetaVariant {
    OneCosine,
    TwoCosine,
    NCosine,
    DecayNCosine,
}

impl FromStr for ZetaVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "one-cosine" | "1-cosine" => Ok(ZetaVariant::OneCosine),
            "two-cosine" | "2-cosine" => Ok(ZetaVariant::TwoCosine),
            "n-cosine" => Ok(ZetaVariant::NCosine),
            "decay-n-cosine" => Ok(ZetaVariant::DecayNCosine),
            other => Err(format!("unknown zeta variant `{other}`")),
        }
    }
}

/// Piecewise decaying cosine annealing of the topology update fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaSchedule {
    pub variant: ZetaVariant,
    /// Segment boundaries `T_0 < T_1 < … < T_last`.
    pub boundaries: Vec<u64>,
    /// Magnitude `ζ_i` of each segment.
    pub magnitudes: Vec<f64>,
}

impl ZetaSchedule {
    /// Segments: `[0, T_W+T_U)` followed by one segment per restoration
    /// stage. `decay_ratio` scales each successive magnitude in the
    /// decaying variant.
    pub fn new(variant: ZetaVariant, initial: f64, phase: &PhaseConfig, decay_ratio: f64) -> Self {
        let t1 = phase.restoration_start();
        let end = phase.end();
        let boundaries: Vec<u64> = match variant {
            ZetaVariant::OneCosine => vec![0, end],
            ZetaVariant::TwoCosine => vec![0, t1, end],
            ZetaVariant::NCosine | ZetaVariant::DecayNCosine => {
                std::iter::once(0).chain((0..=phase.stages as u64).map(|k| t1 + k * phase.grow_interval)).collect()
            }
        };
        let segments = boundaries.len() - 1;
        let magnitudes = (0..segments)
            .map(|i| match variant {
                ZetaVariant::DecayNCosine => initial * decay_ratio.powi(i as i32),
                _ => initial,
            })
            .collect();
        ZetaSchedule { variant, boundaries, magnitudes }
    }

    /// `ζ_t = ζ_i/2 · (1 + cos(π·(t − T_{i−1})/(T_i − T_{i−1})))` within
    /// segment `i`; zero at and after the final boundary.
    pub fn zeta(&self, t: u64) -> f64 {
        for (i, w) in self.boundaries.windows(2).enumerate() {
            let (start, end) = (w[0], w[1]);
            if t >= start && t < end {
                let frac = (t - start) as f64 / (end - start) as f64;
                return self.magnitudes[i] / 2.0 * (1.0 + (frac * PI).cos());
            }
        }
        0.0
    }

    pub fn end(&self) -> u64 {
        *self.boundaries.last().unwrap_or(&0)
    }
}

/// Hybrid sparse attention: stride `stride` before `dense_from`, dense after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrideSchedule {
    pub stride: usize,
    pub dense_from: u64,
}

impl StrideSchedule {
    pub fn stride_at(&self, t: u64) -> usize {
        if t < self.dense_from {
            self.stride.max(1)
        } else {
            1
        }
    }
}

/// Linear warmup, cosine decay to `min_lr` at `decay_steps`, flat after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { peak: 6e-4, min: 6e-5, warmup_steps: 2000, decay_steps: 140_000 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, t: u64) -> f64 {
        if t < self.warmup_steps {
            return self.peak * t as f64 / self.warmup_steps as f64;
        }
        if t >= self.decay_steps {
            return self.min;
        }
        let span = (self.decay_steps - self.warmup_steps) as f64;
        let ratio = (t - self.warmup_steps) as f64 / span;
        self.min + 0.5 * (1.0 + (PI * ratio).cos()) * (self.peak - self.min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_phase() -> PhaseConfig {
        PhaseConfig::default()
    }

    #[test]
    fn sv_endpoints() {
        let p = paper_phase();
        assert_eq!(p.sparsity(0), 0.0);
        assert!((p.sparsity(p.warmup_steps()) - 0.96).abs() < 1e-15);
        assert!((p.sparsity(p.restoration_start()) - 0.96).abs() < 1e-15);
        assert_eq!(p.sparsity(p.end()), 0.0);
        assert_eq!(p.end(), 120_000);
    }

    #[test]
    fn sv_stage_values() {
        let p = paper_phase();
        // 0.96·(1 − 0.8³)
        assert!((p.sparsity(2000) - 0.46848).abs() < 1e-12);
        assert!((p.sparsity(3999) - 0.46848).abs() < 1e-12);
        // restoration stage 4 of 5: 0.96·0.2³
        let t = p.restoration_start() + 4 * 2000;
        assert!((p.sparsity(t) - 0.00768).abs() < 1e-12);
    }

    #[test]
    fn sv_range_error() {
        assert!(sv_sparsity(10, &paper_phase(), 5).is_err());
        assert_eq!(sv_sparsity(0, &paper_phase(), 5).unwrap(), 0.0);
    }

    #[test]
    fn presets() {
        let phase = PhaseConfig { max_sparsity: 0.9, ..paper_phase() };
        let mut plan = SparsityPlan::sv(phase, 140_000);
        plan.sd_switch = 60_000;
        let sd = plan.with_kind(PlanKind::Sd);
        assert_eq!(sd.sparsity_at(59_999).unwrap(), 0.9);
        assert_eq!(sd.sparsity_at(60_000).unwrap(), 0.0);
        for t in [0, 77, 140_000] {
            assert_eq!(plan.with_kind(PlanKind::Dense).sparsity_at(t).unwrap(), 0.0);
            assert_eq!(plan.with_kind(PlanKind::Sparse).sparsity_at(t).unwrap(), 0.9);
        }
        let dsd = plan.with_kind(PlanKind::Dsd);
        assert_eq!(dsd.sparsity_at(0).unwrap(), 0.0);
        assert_eq!(dsd.sparsity_at(plan.dsd_sparse_from).unwrap(), 0.9);
        assert_eq!(dsd.sparsity_at(plan.dsd_dense_from).unwrap(), 0.0);
        let gd = plan.with_kind(PlanKind::Gd);
        assert_eq!(gd.sparsity_at(0).unwrap(), 0.9);
        assert_eq!(gd.sparsity_at(140_000).unwrap(), 0.0);
        assert!(gd.sparsity_at(140_001).is_err());
    }

    #[test]
    fn zeta_segment_identities() {
        let p = paper_phase();
        let z = ZetaSchedule::new(ZetaVariant::NCosine, 0.3, &p, 0.5);
        assert_eq!(z.boundaries.len(), p.stages as usize + 2);
        assert_eq!(z.zeta(0), 0.3);
        assert!((z.zeta(p.restoration_start() / 2) - 0.15).abs() < 1e-12);
        assert_eq!(z.zeta(p.restoration_start()), 0.3);
        assert!(z.zeta(p.restoration_start() - 1) < 1e-8);
        assert_eq!(z.zeta(p.end()), 0.0);
    }

    #[test]
    fn decaying_magnitudes_halve() {
        let p = paper_phase();
        let z = ZetaSchedule::new(ZetaVariant::DecayNCosine, 0.3, &p, 0.5);
        assert_eq!(z.magnitudes, vec![0.3, 0.15, 0.075, 0.0375, 0.01875, 0.009375]);
    }

    #[test]
    fn stride_switch() {
        let s = StrideSchedule { stride: 256, dense_from: 110_000 };
        assert_eq!(s.stride_at(109_999), 256);
        assert_eq!(s.stride_at(110_000), 1);
        let d = StrideSchedule { stride: 1, dense_from: u64::MAX };
        assert_eq!(d.stride_at(5), 1);
    }

    #[test]
    fn lr_shape() {
        let lr = LrSchedule::default();
        assert_eq!(lr.lr_at(0), 0.0);
        assert!((lr.lr_at(2000) - 6e-4).abs() < 1e-18);
        assert!((lr.lr_at(140_000) - 6e-5).abs() < 1e-18);
        assert_eq!(lr.lr_at(200_000), 6e-5);
        assert!(lr.lr_at(50_000) < 6e-4 && lr.lr_at(50_000) > 6e-5);
    }
}
