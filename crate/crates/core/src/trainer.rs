//! Training loop, evaluation and analysis exports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::attention::AttentionPattern;
use crate::checkpoint::{self, CheckpointError, TrainingMeta};
use crate::config::{ConfigError, Precision, RunConfig};
use crate::data::{DataError, Dataset, Split};
use crate::flops::{FlopCounter, FlopError};
use crate::model::{ModelError, ModelState};
use crate::rng::Rng;
use crate::schedules::{LrSchedule, SparsityPlan, ZetaSchedule};
use crate::tensor::{AdamW, ParamSlot, Scalar, TensorError};
use crate::topology::{global_evolve, EvolutionScheme, SchemeKind, TopologyError, EVOLUTION_LOG_HEADER};

pub const METRICS_HEADER: &str = "step,train_loss,val_loss,val_ppl,sparsity,zeta,stride,lr,cum_flops";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVOLUTION_FILE: &str = "evolution_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

const EVAL_SALT: u64 = 0x5eed_e7a1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Flops(#[from] FlopError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite {what} at step {step}; last good checkpoint kept")]
    NonFinite { what: String, step: u64 },
}

impl TrainError {
    /// Whether the failure stems from the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, TrainError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// One metrics CSV row, written every `eval_interval` completed steps and at
/// the end of the run. Schedule columns describe the last executed step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub sparsity: f64,
    pub zeta: f64,
    pub stride: usize,
    pub lr: f64,
    pub cum_flops: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.train_loss,
            self.val_loss,
            self.val_ppl,
            self.sparsity,
            self.zeta,
            self.stride,
            self.lr,
            self.cum_flops
        )
    }

    pub fn parse(line: &str) -> Option<MetricsRow> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return None;
        }
        Some(MetricsRow {
            step: f[0].parse().ok()?,
            train_loss: f[1].parse().ok()?,
            val_loss: f[2].parse().ok()?,
            val_ppl: f[3].parse().ok()?,
            sparsity: f[4].parse().ok()?,
            zeta: f[5].parse().ok()?,
            stride: f[6].parse().ok()?,
            lr: f[7].parse().ok()?,
            cum_flops: f[8].parse().ok()?,
        })
    }
}

/// Attention pattern used to evaluate a model after `completed` steps: the
/// pattern of the last executed step.
pub fn eval_pattern(cfg: &RunConfig, completed: u64) -> Result<AttentionPattern, ConfigError> {
    cfg.pattern_at(completed.saturating_sub(1))
}

/// Mean validation loss over `eval_batches` batches drawn from a stream
/// seeded only by the config, so any caller gets the same batches.
pub fn evaluate<T: Scalar>(
    state: &ModelState<T>,
    data: &Dataset,
    cfg: &RunConfig,
    pattern: &AttentionPattern,
) -> Result<f64, TrainError> {
    let mut rng = Rng::new(cfg.seed ^ EVAL_SALT);
    let mut total = 0.0;
    for _ in 0..cfg.eval_batches {
        let (x, y) = data.sample_batch(Split::Val, cfg.batch_size, cfg.block_size, &mut rng)?;
        total += state.loss(&x, &y, cfg.batch_size, pattern)?;
    }
    Ok(total / cfg.eval_batches as f64)
}

/// Loads the corpus named by the config, checking it against the model
/// vocabulary when one is fixed.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, TrainError> {
    Ok(Dataset::ingest(&cfg.data_path, cfg.tokenizer, cfg.val_fraction)?)
}

fn model_vocab(cfg: &RunConfig, data: &Dataset) -> Result<usize, TrainError> {
    match cfg.vocab_size {
        Some(v) if v < data.vocab_size() => Err(ConfigError::Invalid(format!(
            "vocab_size {v} is smaller than the corpus vocabulary {}",
            data.vocab_size()
        ))
        .into()),
        Some(v) => Ok(v),
        None => Ok(data.vocab_size()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_val_loss: f64,
    pub cum_flops: f64,
    pub final_sparsity: f64,
    pub rows: Vec<MetricsRow>,
}

/// Complete training state for one run.
pub struct Trainer<T> {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub state: ModelState<T>,
    pub step: u64,
    pub cum_flops: f64,
    data_rng: Rng,
    topology_rng: Rng,
    optimizer: AdamW,
    plan: SparsityPlan,
    zeta: ZetaSchedule,
    lr: LrSchedule,
    scheme: EvolutionScheme,
    counter: FlopCounter,
    out_dir: PathBuf,
    loss_sum: f64,
    loss_count: u64,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run. Masks start at the plan's step-0 sparsity.
    pub fn new(cfg: RunConfig, data: Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        let vocab = model_vocab(&cfg, &data)?;
        let plan = cfg.plan();
        let mut master = Rng::new(cfg.seed);
        let mut init_rng = master.fork();
        let data_rng = master.fork();
        let topology_rng = master.fork();
        let initial = plan.sparsity_at(0).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let state = ModelState::new(cfg.model_config(vocab), initial, &mut init_rng)?;
        Self::assemble(cfg, data, state, 0, 0.0, data_rng, topology_rng)
    }

    /// Continues from a checkpoint; `data` must tokenize identically.
    pub fn resume(
        ckpt: checkpoint::Checkpoint<T>,
        data: Dataset,
        out_dir: Option<PathBuf>,
    ) -> Result<Self, TrainError> {
        let mut cfg = ckpt.meta.run.clone();
        if let Some(o) = out_dir {
            cfg.out_dir = o;
        }
        if data.tokenizer != ckpt.meta.tokenizer {
            return Err(ConfigError::Invalid("corpus vocabulary differs from the checkpoint's".into()).into());
        }
        let mut trainer = Self::assemble(
            cfg,
            data,
            ckpt.state,
            ckpt.meta.step,
            ckpt.meta.cum_flops,
            Rng::from_state(ckpt.meta.data_rng),
            Rng::from_state(ckpt.meta.topology_rng),
        )?;
        trainer.loss_sum = ckpt.meta.loss_sum;
        trainer.loss_count = ckpt.meta.loss_count;
        Ok(trainer)
    }

    fn assemble(
        cfg: RunConfig,
        data: Dataset,
        state: ModelState<T>,
        step: u64,
        cum_flops: f64,
        data_rng: Rng,
        topology_rng: Rng,
    ) -> Result<Self, TrainError> {
        let counter = FlopCounter::new(cfg.flop_schedule(state.config.vocab_size)?)?;
        Ok(Trainer {
            optimizer: AdamW::new(cfg.optimizer()),
            plan: cfg.plan(),
            zeta: cfg.zeta_schedule(),
            lr: cfg.lr_schedule(),
            scheme: cfg.scheme(),
            counter,
            out_dir: cfg.out_dir.clone(),
            cfg,
            data,
            state,
            step,
            cum_flops,
            data_rng,
            topology_rng,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn meta(&self) -> TrainingMeta {
        TrainingMeta {
            step: self.step,
            run: self.cfg.clone(),
            tokenizer: self.data.tokenizer.clone(),
            data_rng: self.data_rng.state(),
            topology_rng: self.topology_rng.state(),
            cum_flops: self.cum_flops,
            loss_sum: self.loss_sum,
            loss_count: self.loss_count,
        }
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf, TrainError> {
        let path = self.out_dir.join(CHECKPOINT_FILE);
        checkpoint::save(&path, &self.meta(), &self.state)?;
        Ok(path)
    }

    /// Prepares the output directory. A fresh run starts new logs; a
    /// resumed run drops log lines written after its checkpoint. Needed
    /// before driving [`Trainer::train_step`] by hand.
    pub fn prepare_outputs(&self) -> Result<(), TrainError> {
        fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))?;
        let metrics = self.out_dir.join(METRICS_FILE);
        let evolution = self.out_dir.join(EVOLUTION_FILE);
        let k = self.step;
        truncate_log(&metrics, METRICS_HEADER, |step| step <= k)?;
        truncate_log(&evolution, EVOLUTION_LOG_HEADER, |step| step < k)?;
        Ok(())
    }

    /// One optimizer step at index `self.step`, followed by a topology update
    /// when due. Returns the mean training loss.
    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        let t = self.step;
        let cfg = &self.cfg;
        let pattern = cfg.pattern_at(t)?;
        let accum = cfg.grad_accum;
        let mut loss = 0.0;
        let mut grads: Vec<Vec<T>> = Vec::new();
        for _ in 0..accum {
            let (x, y) = self.data.sample_batch(Split::Train, cfg.batch_size, cfg.block_size, &mut self.data_rng)?;
            let (l, g) = match self.state.loss_and_grad(&x, &y, cfg.batch_size, &pattern) {
                Ok(r) => r,
                Err(ModelError::Tensor(TensorError::NonFinite { what })) => {
                    return Err(TrainError::NonFinite { what, step: t });
                }
                Err(e) => return Err(e.into()),
            };
            loss += l;
            if grads.is_empty() {
                grads = g;
            } else {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.iter_mut().zip(gi) {
                        *a = *a + b;
                    }
                }
            }
        }
        if accum > 1 {
            let inv = T::from_f64_lossy(1.0 / accum as f64);
            for g in &mut grads {
                for x in g.iter_mut() {
                    *x = *x * inv;
                }
            }
        }
        let loss = loss / accum as f64;

        let lr = self.lr.lr_at(t);
        {
            let state = &mut self.state;
            let masks = &state.masks;
            let mut slots: Vec<ParamSlot<'_, T>> = state
                .params
                .iter_mut()
                .zip(state.moments.iter_mut())
                .zip(&grads)
                .map(|((p, m), g)| ParamSlot {
                    data: &mut p.data,
                    grad: g,
                    moments: m,
                    mask: p.mask.map(|i| &masks[i]),
                    decay: p.decay,
                })
                .collect();
            if let Err(e) = self.optimizer.step(&mut slots, lr, t + 1) {
                return Err(match e {
                    TensorError::NonFinite { what } => TrainError::NonFinite { what, step: t },
                    other => ModelError::Tensor(other).into(),
                });
            }
        }

        if self.evolution_due(t) {
            let record = global_evolve(
                self.state.layer_views(&grads),
                t,
                &self.plan,
                &self.zeta,
                &self.scheme,
                &mut self.topology_rng,
            )?;
            append(&self.out_dir.join(EVOLUTION_FILE), &record.csv_rows())?;
        }

        self.cum_flops += self.counter.step(t)?;
        self.step += 1;
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(loss)
    }

    /// Whether a topology update runs at the end of step `t`.
    pub fn evolution_due(&self, t: u64) -> bool {
        self.scheme.kind != SchemeKind::Static
            && t.is_multiple_of(self.cfg.update_interval)
            && t <= self.plan.update_horizon()
    }

    fn metrics_row(&mut self) -> Result<MetricsRow, TrainError> {
        let k = self.step;
        let pattern = eval_pattern(&self.cfg, k)?;
        let val_loss = evaluate(&self.state, &self.data, &self.cfg, &pattern)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { what: "validation loss".into(), step: k });
        }
        let last = k.saturating_sub(1);
        let train_loss = if self.loss_count > 0 { self.loss_sum / self.loss_count as f64 } else { f64::NAN };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        Ok(MetricsRow {
            step: k,
            train_loss,
            val_loss,
            val_ppl: val_loss.exp(),
            sparsity: self.state.global_sparsity(),
            zeta: self.zeta.zeta(last),
            stride: self.cfg.stride_schedule().stride_at(last),
            lr: self.lr.lr_at(last),
            cum_flops: self.cum_flops,
        })
    }

    /// Runs until `stop` completed steps (capped at `total_iters`), logging
    /// and checkpointing on schedule. Stopping early writes a checkpoint so
    /// the run can be resumed.
    pub fn run_until(&mut self, stop: u64) -> Result<TrainSummary, TrainError> {
        let stop = stop.min(self.cfg.total_iters);
        self.prepare_outputs()?;
        let metrics_path = self.out_dir.join(METRICS_FILE);
        let mut rows = Vec::new();
        let mut last_val = f64::NAN;
        while self.step < stop {
            self.train_step()?;
            let k = self.step;
            let finished = k == self.cfg.total_iters;
            if k.is_multiple_of(self.cfg.eval_interval) || finished {
                let row = self.metrics_row()?;
                append(&metrics_path, &format!("{}\n", row.to_csv()))?;
                last_val = row.val_loss;
                rows.push(row);
            }
            if k.is_multiple_of(self.cfg.checkpoint_interval) || finished {
                self.save_checkpoint()?;
            }
        }
        if !self.step.is_multiple_of(self.cfg.checkpoint_interval) && self.step != self.cfg.total_iters {
            self.save_checkpoint()?;
        }
        Ok(TrainSummary {
            steps: self.step,
            final_val_loss: last_val,
            cum_flops: self.cum_flops,
            final_sparsity: self.state.global_sparsity(),
            rows,
        })
    }

    pub fn run(&mut self) -> Result<TrainSummary, TrainError> {
        self.run_until(self.cfg.total_iters)
    }
}

fn append(path: &Path, text: &str) -> Result<(), TrainError> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Rewrites a CSV log keeping the header and rows whose leading step passes
/// `keep`; creates it with just the header if absent.
fn truncate_log(path: &Path, header: &str, keep: impl Fn(u64) -> bool) -> Result<(), TrainError> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if step.is_some_and(&keep) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Options for [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed steps (simulated interruption).
    pub stop_after: Option<u64>,
}

fn train_typed<T: Scalar>(cfg: RunConfig, opts: &TrainOptions) -> Result<TrainSummary, TrainError> {
    let mut trainer = match &opts.resume {
        Some(path) => {
            let ckpt = checkpoint::load_as::<T>(path)?;
            let data = load_dataset(&ckpt.meta.run)?;
            Trainer::resume(ckpt, data, opts.out_dir.clone())?
        }
        None => {
            let mut cfg = cfg;
            if let Some(o) = &opts.out_dir {
                cfg.out_dir = o.clone();
            }
            let data = load_dataset(&cfg)?;
            Trainer::<T>::new(cfg, data)?
        }
    };
    let stop = opts.stop_after.unwrap_or(trainer.cfg.total_iters);
    trainer.run_until(stop)
}

/// Trains at the configured precision (the checkpoint's, when resuming).
pub fn train(cfg: RunConfig, opts: &TrainOptions) -> Result<TrainSummary, TrainError> {
    let precision = match &opts.resume {
        Some(path) => match checkpoint::load(path)? {
            checkpoint::AnyCheckpoint::F32(_) => Precision::F32,
            checkpoint::AnyCheckpoint::F64(_) => Precision::F64,
        },
        None => cfg.precision,
    };
    match precision {
        Precision::F32 => train_typed::<f32>(cfg, opts),
        Precision::F64 => train_typed::<f64>(cfg, opts),
    }
}

/// Validation loss of a checkpoint with the pattern of its last step.
pub fn eval_checkpoint(path: &Path, data_override: Option<&Path>) -> Result<f64, TrainError> {
    fn run<T: Scalar>(c: checkpoint::Checkpoint<T>, data_override: Option<&Path>) -> Result<f64, TrainError> {
        let mut cfg = c.meta.run.clone();
        if let Some(p) = data_override {
            cfg.data_path = p.to_path_buf();
        }
        let data = load_dataset(&cfg)?;
        if data.tokenizer != c.meta.tokenizer {
            return Err(ConfigError::Invalid("corpus vocabulary differs from the checkpoint's".into()).into());
        }
        let pattern = eval_pattern(&cfg, c.meta.step)?;
        evaluate(&c.state, &data, &cfg, &pattern)
    }
    match checkpoint::load(path)? {
        checkpoint::AnyCheckpoint::F32(c) => run(c, data_override),
        checkpoint::AnyCheckpoint::F64(c) => run(c, data_override),
    }
}

/// `|w|` of one parameter matrix as CSV, one row per matrix row. Values use
/// shortest round-trip formatting; masked entries print as `0`.
pub fn heatmap_csv<T: Scalar>(state: &ModelState<T>, name: &str) -> Option<String> {
    let p = &state.params[state.param_by_name(name)?];
    let mut out = String::with_capacity(p.data.len() * 8);
    for r in 0..p.rows {
        let row = &p.data[r * p.cols..(r + 1) * p.cols];
        let cells: Vec<String> = row.iter().map(|x| format!("{}", x.abs())).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Some(out)
}

/// Parses a heatmap CSV back into a row-major matrix.
pub fn parse_heatmap(text: &str) -> Option<(usize, usize, Vec<f64>)> {
    let mut rows = 0;
    let mut cols = None;
    let mut data = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let vals: Vec<f64> = line.split(',').map(|s| s.parse().ok()).collect::<Option<_>>()?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return None;
        }
        data.extend(vals);
        rows += 1;
    }
    Some((rows, cols?, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let text: String = (0..4000).map(|i| ["the cat ", "a dog ", "sat on ", "mats. "][i % 4]).collect();
        let data = dir.join("corpus.txt");
        fs::write(&data, text).unwrap();
        RunConfig {
            n_layers: 1,
            n_heads: 2,
            n_embd: 8,
            block_size: 8,
            batch_size: 2,
            total_iters: 40,
            warmup_iters: 4,
            lr_decay_iters: 40,
            learning_rate: 1e-2,
            min_lr: 1e-3,
            max_sparsity: 0.8,
            stages: 2,
            prune_interval: 4,
            ultra_steps: 12,
            grow_interval: 4,
            update_interval: 2,
            stride: 3,
            eval_interval: 10,
            eval_batches: 2,
            checkpoint_interval: 20,
            data_path: data,
            out_dir: dir.join("run"),
            ..RunConfig::default()
        }
    }

    #[test]
    fn metrics_row_round_trip() {
        let row = MetricsRow {
            step: 3,
            train_loss: 1.25,
            val_loss: 2.0,
            val_ppl: 2f64.exp(),
            sparsity: 0.5,
            zeta: 0.1,
            stride: 4,
            lr: 1e-4,
            cum_flops: 1.5e9,
        };
        assert_eq!(MetricsRow::parse(&row.to_csv()), Some(row));
        assert_eq!(METRICS_HEADER.split(',').count(), 9);
    }

    #[test]
    fn tiny_run_logs_and_tracks_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let summary = train(cfg.clone(), &TrainOptions::default()).unwrap();
        assert_eq!(summary.steps, 40);
        assert_eq!(summary.rows.len(), 4);
        assert_eq!(summary.final_sparsity, 0.0);
        let metrics = fs::read_to_string(cfg.out_dir.join(METRICS_FILE)).unwrap();
        assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));
        assert_eq!(metrics.lines().count(), 5);
        let log = fs::read_to_string(cfg.out_dir.join(EVOLUTION_FILE)).unwrap();
        assert!(log.lines().count() > 1);
        assert!(cfg.out_dir.join(CHECKPOINT_FILE).exists());
        // eval through the checkpoint path matches the logged value
        let v = eval_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE), None).unwrap();
        assert_eq!(v, summary.final_val_loss);
    }

    #[test]
    fn heatmap_matches_weights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let data = load_dataset(&cfg).unwrap();
        let t =
            Trainer::<f32>::new(RunConfig { sparsity_plan: crate::schedules::PlanKind::Sparse, ..cfg }, data).unwrap();
        let csv = heatmap_csv(&t.state, "h0.proj").unwrap();
        let (r, c, vals) = parse_heatmap(&csv).unwrap();
        let idx = t.state.param_by_name("h0.proj").unwrap();
        let p = &t.state.params[idx];
        assert_eq!((r, c), (p.rows, p.cols));
        for (a, b) in vals.iter().zip(&p.data) {
            assert_eq!(*a as f32, b.abs());
        }
        let mask = t.state.mask_for(idx).unwrap();
        assert!(mask.iter_inactive().all(|i| vals[i] == 0.0));
        assert!(heatmap_csv(&t.state, "nope").is_none());
    }
}
