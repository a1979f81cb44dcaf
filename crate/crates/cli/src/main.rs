use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use keyscreen::balance::Strategy;
use keyscreen::nn::Arch;
use keyscreen::pipeline::{self, ExperimentConfig, ExperimentRecord, Stage};
use keyscreen::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "keyscreen", version, about = "Keystroke-dynamics screening pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort (events.csv, labels.csv).
    Synth(Common),
    /// Clean raw key events into timing signals.
    Preprocess(Common),
    /// Cross-validated pre-training, with optional hyper-parameter search.
    Pretrain(Common),
    /// Fine-tune the best pre-training fold under both freeze policies.
    Finetune(Common),
    /// Score a held-out cohort with the selected fine-tuned checkpoint.
    External(Common),
    /// Build comparison tables from earlier runs.
    Report(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// gru, lstm, gru_fcn, lstm_fcn, tcn or transformer.
    #[arg(long)]
    arch: Option<String>,
    /// unbalanced, undersample or imbalmed.
    #[arg(long)]
    balance: Option<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn resolve(stage: Stage, args: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.stage = stage;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if let Some(a) = &args.arch {
        cfg.arch = Arch::parse(a)?;
    }
    if let Some(b) = &args.balance {
        cfg.balance.strategy =
            Strategy::parse(b).ok_or_else(|| Error::Config(format!("unknown balancing strategy `{b}`")))?;
    }
    if args.jobs.is_some() {
        cfg.jobs = args.jobs;
    }
    Ok(cfg)
}

fn summary(rec: &ExperimentRecord) {
    println!("{} completed in {:.1}s", rec.stage.name(), rec.wall_clock_secs);
    for s in &rec.summaries {
        let policy = s.policy.map_or(String::new(), |p| format!(" [{}]", p.name()));
        println!("  mean AUC-ROC {:.4}  mean F1 {:.4}  best fold {}{policy}", s.mean_auc, s.mean_f1, s.best_fold);
    }
    if let Some(p) = rec.selected_policy {
        println!("  selected policy: {}", p.name());
    }
}

fn execute(cli: Cli) -> Result<ExperimentRecord> {
    let (stage, args) = match &cli.command {
        Command::Synth(a) => (Stage::Synth, a),
        Command::Preprocess(a) => (Stage::Preprocess, a),
        Command::Pretrain(a) => (Stage::Pretrain, a),
        Command::Finetune(a) => (Stage::Finetune, a),
        Command::External(a) => (Stage::ExternalValidate, a),
        Command::Report(a) => (Stage::Report, a),
    };
    let cfg = resolve(stage, args)?;
    cfg.validate()?;
    if let Some(n) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    }
    pipeline::run(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(rec) => {
            summary(&rec);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
