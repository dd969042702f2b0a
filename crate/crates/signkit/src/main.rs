//! Command-line driver: corpus synthesis, pre-training, task fine-tuning,
//! and deterministic re-evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use signkit::config::RunConfig;
use signkit::error::{Error, Result};
use signkit::synthetic::build_corpus;
use signkit::task::Task;
use signkit::train;

/// Relative output paths are resolved against this root when it is set.
const OUT_ROOT_ENV: &str = "SIGNKIT_OUT_ROOT";

#[derive(Parser)]
#[command(name = "signkit", version, about = "Sign-language pose pre-training and downstream tasks")]
struct Cli {
    /// Flat JSON config file with dotted keys, e.g. {"mask.ratio": 0.4}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set mask.ratio=0.5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pose-text corpus.
    Synth {
        /// Corpus output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint masked-reconstruction and contrastive pre-training.
    Pretrain {
        /// Corpus directory holding manifest.jsonl.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoint and loss report.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint stem to resume from; refused if the config differs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a downstream task on top of an optional pre-trained encoder.
    Finetune {
        /// One of: islr, cslr, slt, slrt.
        #[arg(long)]
        task: String,
        #[arg(long)]
        corpus: PathBuf,
        /// Pre-training checkpoint stem; omit to train from scratch.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Output directory for checkpoint, report, and predictions.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a saved task model's evaluation.
    Evaluate {
        /// One of: islr, cslr, slt, slrt.
        #[arg(long)]
        task: String,
        /// Checkpoint stem of a fine-tuned model.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for the report and predictions.
        #[arg(long)]
        out: PathBuf,
        /// Evaluation split override: train or holdout.
        #[arg(long)]
        split: Option<String>,
    },
}

fn resolve_out(path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path,
    }
}

fn load_config(config: &Option<PathBuf>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in sets {
        cfg.apply_set(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config, &cli.sets)?;
    match cli.command {
        Command::Synth { out } => {
            let out = resolve_out(out);
            let n = cfg.usize_of("synth.num_samples");
            let manifest = build_corpus(&cfg.synth_config()?, n, &out)?;
            let report = serde_json::json!({
                "config_hash": cfg.hash(),
                "num_samples": manifest.records.len(),
            });
            let path = out.join("synth_report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            println!("wrote {} samples to {}", manifest.records.len(), out.display());
        }
        Command::Pretrain { corpus, out, resume } => {
            let out = resolve_out(out);
            let outcome = train::pretrain(&cfg, &corpus, &out, resume.as_deref())?;
            if let Some(last) = outcome.epoch_losses.last() {
                println!(
                    "final losses: reconstruction {:.6}, contrastive {:.6}",
                    last.pr, last.stc
                );
            }
            println!("checkpoint at {} (config {})", outcome.stem.display(), outcome.config_hash);
        }
        Command::Finetune { task, corpus, pretrained, out } => {
            let task = Task::parse(&task)?;
            let out = resolve_out(out);
            let report = train::finetune(&cfg, task, &corpus, pretrained.as_deref(), &out)?;
            print_report(&report, &out);
        }
        Command::Evaluate { task, model, corpus, out, split } => {
            let task = Task::parse(&task)?;
            let out = resolve_out(out);
            let report = train::evaluate(task, &model, &corpus, &out, split.as_deref())?;
            print_report(&report, &out);
        }
    }
    Ok(())
}

fn print_report(report: &train::TaskReport, out: &std::path::Path) {
    println!("task {} on {} samples:", report.task, report.n_eval);
    for (k, v) in &report.metrics {
        println!("  {k}: {v:.4}");
    }
    println!("report at {} (config {})", out.display(), report.config_hash);
}

/// Exit 1 covers everything a caller can fix: bad flags, bad configs,
/// unreadable inputs, mismatched artifacts. Exit 2 covers internal
/// invariant failures.
fn classify(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Format { .. }
        | Error::Layout(_)
        | Error::Checkpoint(_)
        | Error::Infeasible { .. }
        | Error::Io { .. } => 1,
        Error::Shape(_) | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}
