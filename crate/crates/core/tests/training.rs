mod common;

use std::fs;
use std::path::Path;

use mst_core::attention::AttentionPattern;
use mst_core::config::RunConfig;
use mst_core::data::Dataset;
use mst_core::flops::training_flops;
use mst_core::model::{ModelConfig, ModelState};
use mst_core::rng::Rng;
use mst_core::trainer::{self, MetricsRow, TrainOptions, Trainer, EVOLUTION_FILE, METRICS_FILE};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        n_embd: 16,
        block_size: 8,
        vocab_size: 11,
        tie_embeddings: true,
        mask_lm_head: true,
    }
}

#[test]
fn logits_are_causal() {
    let cfg = tiny_model();
    let state: ModelState<f64> = ModelState::new(cfg, 0.5, &mut Rng::new(1)).unwrap();
    let pattern = AttentionPattern::strided(8, 3).unwrap();
    let base: Vec<usize> = (0..8).map(|i| (i * 3) % 11).collect();
    let a = state.forward(&base, 1, &pattern).unwrap();
    for j in 0..8 {
        let mut changed = base.clone();
        changed[j] = (changed[j] + 5) % 11;
        let b = state.forward(&changed, 1, &pattern).unwrap();
        let v = cfg.vocab_size;
        assert_eq!(a.data()[..j * v], b.data()[..j * v], "position {j} leaked backwards");
        assert_ne!(a.data()[j * v..(j + 1) * v], b.data()[j * v..(j + 1) * v]);
    }
}

#[test]
fn full_stride_equals_dense() {
    let state: ModelState<f64> = ModelState::new(tiny_model(), 0.3, &mut Rng::new(2)).unwrap();
    let tokens: Vec<usize> = (0..16).map(|i| (i * 7) % 11).collect();
    let dense = state.forward(&tokens, 2, &AttentionPattern::dense(8).unwrap()).unwrap();
    let strided = state.forward(&tokens, 2, &AttentionPattern::strided(8, 8).unwrap()).unwrap();
    assert_eq!(dense, strided);
}

#[test]
fn fresh_model_loss_near_uniform() {
    let cfg = ModelConfig { vocab_size: 65, ..tiny_model() };
    let state: ModelState<f32> = ModelState::new(cfg, 0.0, &mut Rng::new(3)).unwrap();
    let mut rng = Rng::new(4);
    let x: Vec<usize> = (0..32).map(|_| rng.below(65)).collect();
    let y: Vec<usize> = (0..32).map(|_| rng.below(65)).collect();
    let loss = state.loss(&x, &y, 4, &AttentionPattern::dense(8).unwrap()).unwrap();
    let uniform = (65f64).ln();
    assert!((loss - uniform).abs() < 0.1 * uniform, "{loss} vs {uniform}");
}

fn run_config(dir: &Path) -> RunConfig {
    let data = dir.join("corpus.txt");
    fs::write(&data, common::small_corpus(30_000)).unwrap();
    let mut cfg = RunConfig::from_toml_str(
        r#"
n_layers = 1
n_heads = 2
n_embd = 16
block_size = 16
learning_rate = 3e-3
min_lr = 3e-4
warmup_iters = 5
lr_decay_iters = 70
total_iters = 70
batch_size = 2
max_sparsity = 0.8
stages = 2
prune_interval = 10
ultra_steps = 20
grow_interval = 10
update_interval = 5
stride = 4
eval_interval = 20
eval_batches = 2
checkpoint_interval = 30
"#,
    )
    .unwrap();
    cfg.data_path = data;
    cfg.out_dir = dir.join("out");
    cfg
}

#[test]
fn realized_sparsity_follows_plan_and_flops_match() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = run_config(tmp.path());
    let data = Dataset::ingest(&cfg.data_path, cfg.tokenizer, cfg.val_fraction).unwrap();
    let mut trainer: Trainer<f32> = Trainer::new(cfg.clone(), data).unwrap();
    trainer.prepare_outputs().unwrap();
    let plan = cfg.plan();
    let total: usize = trainer.state.masks.iter().map(|m| m.len()).sum();
    let layers = trainer.state.masks.len() as f64;
    for t in 0..cfg.total_iters {
        trainer.train_step().unwrap();
        if trainer.evolution_due(t) {
            let target = plan.sparsity_at(t).unwrap();
            let active: usize = trainer.state.masks.iter().map(|m| m.active_count()).sum();
            assert!((active as f64 - (1.0 - target) * total as f64).abs() <= layers, "step {t}");
        }
    }
    let sched = cfg.flop_schedule(trainer.state.config.vocab_size).unwrap();
    let expected = training_flops(&sched, cfg.total_iters).unwrap().total;
    assert!((trainer.cum_flops - expected).abs() <= 1e-9 * expected);
}

#[test]
fn logs_checkpoint_and_eval_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = run_config(tmp.path());
    let summary = trainer::train(cfg.clone(), &TrainOptions::default()).unwrap();
    let out = &cfg.out_dir;
    let text = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let rows: Vec<MetricsRow> = text.lines().skip(1).map(|l| MetricsRow::parse(l).unwrap()).collect();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), [20, 40, 60, 70]);
    // Stride switches to dense at restoration start (step 40); the rows report the last executed step.
    assert_eq!(rows[0].stride, 4);
    assert_eq!(rows[2].stride, 1);
    assert_eq!(rows[3].sparsity, 0.0);

    let ckpt = out.join(trainer::CHECKPOINT_FILE);
    let a = trainer::eval_checkpoint(&ckpt, None).unwrap();
    let b = trainer::eval_checkpoint(&ckpt, None).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(a, summary.final_val_loss);

    let log = fs::read_to_string(out.join(EVOLUTION_FILE)).unwrap();
    let steps: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    assert!(steps.iter().all(|s| s % 5 == 0 && *s <= 60));
}

#[test]
fn resume_rewrites_logs_after_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = run_config(tmp.path());
    let full_dir = tmp.path().join("full");
    trainer::train(cfg.clone(), &TrainOptions { out_dir: Some(full_dir.clone()), ..Default::default() }).unwrap();
    let part = tmp.path().join("part");
    let opts = TrainOptions { out_dir: Some(part.clone()), stop_after: Some(45), ..Default::default() };
    trainer::train(cfg.clone(), &opts).unwrap();
    // Stale lines past the checkpoint must be dropped on resume.
    let mut stale = fs::read_to_string(part.join(METRICS_FILE)).unwrap();
    stale.push_str("999,1,1,1,0,0,1,0,0\n");
    fs::write(part.join(METRICS_FILE), stale).unwrap();
    let resume = TrainOptions { resume: Some(part.join(trainer::CHECKPOINT_FILE)), ..Default::default() };
    trainer::train(cfg, &resume).unwrap();
    for f in [METRICS_FILE, EVOLUTION_FILE] {
        assert_eq!(fs::read(full_dir.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }
}
