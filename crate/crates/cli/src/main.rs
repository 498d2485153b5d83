use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use mst_core::attention::{AttentionPattern, PatternFamily};
use mst_core::checkpoint::{self, AnyCheckpoint};
use mst_core::config::{ConfigError, RunConfig};
use mst_core::flops::{forward_flops, training_flops};
use mst_core::trainer::{self, TrainError, TrainOptions};

#[derive(Parser)]
#[command(name = "mst", version, about = "Mixed sparsity training for small GPT models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint (its stored config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps and checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Validation loss and perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus to evaluate on instead of the stored one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Analytic FLOP report and reduction versus dense training.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Vocabulary size for accounting (defaults to the config's or 50257).
        #[arg(long)]
        vocab: Option<usize>,
        /// Print the per-component report as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Print an attention mask and its attended-pair ratio.
    Pattern {
        #[arg(long, default_value = "strided")]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1)]
        summary: usize,
        /// Skip the grid and print only the counts.
        #[arg(long)]
        quiet: bool,
    },
    /// Export |weights| of one parameter matrix as CSV.
    ExportHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Parameter name, e.g. `h0.proj`.
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure class, mapped to the process exit code.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn config_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(config_failure),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    stop_after: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        if resume.is_some() {
            return Err(config_failure(ConfigError::Invalid("--seed cannot change a resumed run".into())));
        }
        cfg.seed = s;
    }
    let opts = TrainOptions { resume, out_dir: out, stop_after };
    let summary = trainer::train(cfg, &opts)?;
    println!(
        "steps {}  val_loss {:.4}  val_ppl {:.3}  sparsity {:.4}  flops {:.4e}",
        summary.steps,
        summary.final_val_loss,
        summary.final_val_loss.exp(),
        summary.final_sparsity,
        summary.cum_flops
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: Option<&Path>) -> Result<(), Failure> {
    let loss = trainer::eval_checkpoint(checkpoint, data)?;
    println!("val_loss {loss}\nval_ppl {}", loss.exp());
    Ok(())
}

fn cmd_flops(config: Option<&Path>, vocab: Option<usize>, csv: bool) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let vocab = vocab.or(cfg.vocab_size).unwrap_or(50257);
    let sched = cfg.flop_schedule(vocab).map_err(config_failure)?;
    let dense = forward_flops(&sched.dims, 0.0, 1.0, cfg.reduce_rule).map_err(runtime_failure)?;
    if csv {
        print!("{}", dense.to_csv());
    } else {
        println!("per-sequence dense step (S=0, dense attention):\n{dense}");
    }
    let run = training_flops(&sched, cfg.total_iters).map_err(runtime_failure)?;
    println!("training_flops {:.6e}", run.total);
    println!("dense_training_flops {:.6e}", run.dense_total);
    println!("reduction {:.4}", run.reduction());
    Ok(())
}

fn cmd_pattern(kind: &str, n: usize, stride: usize, summary: usize, quiet: bool) -> Result<(), Failure> {
    let family: PatternFamily = kind.parse().map_err(config_failure)?;
    let p = AttentionPattern::for_stride(family, n, stride, summary).map_err(config_failure)?;
    if !quiet {
        print!("{}", p.to_text_grid());
    }
    println!("pairs {}", p.pair_count());
    println!("q_atten {:.6}", p.q_atten());
    Ok(())
}

fn cmd_export_heatmap(ckpt: &Path, layer: &str, out: Option<&Path>) -> Result<(), Failure> {
    let loaded = checkpoint::load(ckpt).map_err(runtime_failure)?;
    let csv = match &loaded {
        AnyCheckpoint::F32(c) => trainer::heatmap_csv(&c.state, layer),
        AnyCheckpoint::F64(c) => trainer::heatmap_csv(&c.state, layer),
    };
    let names: Vec<String> = match &loaded {
        AnyCheckpoint::F32(c) => c.state.params.iter().map(|p| p.name.clone()).collect(),
        AnyCheckpoint::F64(c) => c.state.params.iter().map(|p| p.name.clone()).collect(),
    };
    let csv =
        csv.ok_or_else(|| config_failure(anyhow::anyhow!("no parameter `{layer}`; available: {}", names.join(", "))))?;
    match out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {}", path.display())).map_err(Failure::Runtime)?
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { config, seed, out, resume, stop_after } => cmd_train(config, seed, out, resume, stop_after),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, data.as_deref()),
        Command::Flops { config, vocab, csv } => cmd_flops(config.as_deref(), vocab, csv),
        Command::Pattern { kind, n, stride, summary, quiet } => cmd_pattern(&kind, n, stride, summary, quiet),
        Command::ExportHeatmap { checkpoint, layer, out } => cmd_export_heatmap(&checkpoint, &layer, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
