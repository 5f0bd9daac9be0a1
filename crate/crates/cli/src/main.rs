//! Command-line front end: train, evaluate, compare, and generate data.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dll_core::config::DataSource;
use dll_core::data::{generate, load_records, save_records};
use dll_core::metrics::{metrics_csv, per_class_csv, MetricsReport};
use dll_core::train::{
    compare, evaluate, model_from_checkpoint, train, CompareRun, TrainOptions,
};
use dll_core::{Checkpoint, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dll", version, about = "Long-tail multi-label training with decoupled features and label-correlation transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write reports and checkpoints.
    Train {
        /// Key-value configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.csv, per_class.csv, runlog.csv, and
        /// checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint base path (without extension) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write metric reports.
    Eval {
        /// Checkpoint base path (without extension).
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL records to evaluate; defaults to the test split of the
        /// checkpoint's own data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run per config and tabulate them side by side.
    Compare {
        /// Configuration files, one per run; rows are labeled by file stem.
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset as JSONL records plus a vocabulary file.
    GenData {
        /// Configuration file with a synthetic data source.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn summarize(report: &MetricsReport) -> String {
    let mut line = String::new();
    for (i, &k) in report.ks.iter().enumerate() {
        line.push_str(&format!(
            "R@{k}={:.4} mR@{k}={:.4} ",
            report.recall[i], report.mean_recall[i]
        ));
    }
    line.push_str(&format!("mean={:.4} mAP={:.4}", report.mean, report.macro_ap));
    line
}

fn write_reports(out: &PathBuf, run: &str, mode: &str, report: &MetricsReport, names: &[String], freqs: &[u64]) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory '{}'", out.display()))?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(run, mode, report))?;
    std::fs::write(
        out.join("per_class.csv"),
        per_class_csv(run, mode, report, names, freqs)?,
    )?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out, resume } => {
            let cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("loading config '{}'", config.display()))?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                resume,
            };
            let outcome = train(&cfg, &opts)?;
            println!(
                "trained mode={} seed={} epochs={} iterations={}",
                cfg.mode,
                cfg.seed,
                cfg.epochs,
                outcome.log.iterations.len()
            );
            println!("test: {}", summarize(&outcome.report));
            println!("reports written to {}", out.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading checkpoint '{}'", checkpoint.display()))?;
            let (model, _) = model_from_checkpoint(&ck)?;
            let records = match data {
                Some(path) => load_records(&path, ck.vocab.n_p())
                    .with_context(|| format!("loading records '{}'", path.display()))?,
                None => dll_core::train::load_data(&ck.config)?.test,
            };
            let (report, _) = evaluate(&ck.config, &model, &ck.vocab, &records)?;
            let names: Vec<String> = ck.vocab.predicates().iter().map(|p| p.name.clone()).collect();
            let freqs: Vec<u64> = ck.vocab.predicates().iter().map(|p| p.train_frequency).collect();
            write_reports(&out, "eval", &ck.config.mode.to_string(), &report, &names, &freqs)?;
            println!(
                "evaluated {} records from epoch-{} checkpoint",
                records.len(),
                ck.epochs_done
            );
            println!("test: {}", summarize(&report));
            println!("reports written to {}", out.display());
        }
        Command::Compare { configs, out } => {
            let mut runs = Vec::with_capacity(configs.len());
            for path in &configs {
                let cfg = ExperimentConfig::from_file(path)
                    .with_context(|| format!("loading config '{}'", path.display()))?;
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                runs.push(CompareRun { label, config: cfg });
            }
            let (csv, outcomes) = compare(&runs)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating output directory '{}'", out.display()))?;
            std::fs::write(out.join("compare.csv"), &csv)?;
            println!("{csv}");
            println!(
                "compared {} runs; table written to {}",
                outcomes.len(),
                out.join("compare.csv").display()
            );
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("loading config '{}'", config.display()))?;
            let DataSource::Synthetic(syn) = &cfg.data else {
                bail!("gen-data needs a config with a synthetic data source");
            };
            let data = generate(syn)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating output directory '{}'", out.display()))?;
            save_records(&out.join("train.jsonl"), &data.train)?;
            save_records(&out.join("test.jsonl"), &data.test)?;
            data.vocab.save(&out.join("vocab.tsv"))?;
            println!(
                "wrote {} train and {} test records over {} classes to {}",
                data.train.len(),
                data.test.len(),
                data.vocab.n_p(),
                out.display()
            );
        }
    }
    Ok(())
}
