//! Command-line front end for CASS experiments.
//!
//! Every verb reads the same TOML experiment config; flags override the
//! config's seed and output location, so a config file plus a seed is
//! enough to reproduce any run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cass::experiment::{
    self, AggregateReport, ExperimentConfig, SweepReport,
};
use cass::{CassError, Result};

#[derive(Parser)]
#[command(name = "cass", version, about = "Siamese self-supervised pretraining experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain one seed; stops before any fine-tuning.
    Pretrain {
        /// Experiment config file.
        #[arg(long, default_value = "experiment.toml")]
        config: PathBuf,
        /// Seed to train; defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's results root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint at one label fraction.
    Finetune {
        #[arg(long, default_value = "experiment.toml")]
        config: PathBuf,
        /// Checkpoint produced by `pretrain` (or `run`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of training labels to use, in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        label_fraction: f64,
        /// Output directory; defaults to `<results root>/finetune`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full experiment: pretrain every seed, fine-tune every checkpoint at
    /// every label fraction, aggregate with 95% CIs.
    Run {
        #[arg(long, default_value = "experiment.toml")]
        config: PathBuf,
        /// Replaces the config's seed list; repeatable.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One full run per sweep value, each in its own cell directory.
    Sweep {
        #[arg(long, default_value = "experiment.toml")]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretraining cost sheet: siamese config vs distillation config on an
    /// identical budget.
    CompareCost {
        /// Config with `method = "cass"`.
        #[arg(long)]
        cass_config: PathBuf,
        /// Config with `method = "dino"` on the same dataset and budget.
        #[arg(long)]
        dino_config: PathBuf,
        /// Output directory; defaults to `<cass results root>/compare_cost`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render report.md, plots, and heatmaps from persisted results.
    Report {
        /// Directory holding aggregate.json or sweep_report.json.
        #[arg(long)]
        from: PathBuf,
        /// Where to write the report; defaults to the source directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_toml_file(path)?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn print_aggregate(report: &AggregateReport) {
    println!(
        "experiment '{}' ({:?}): {} seeds, {} failed",
        report.experiment,
        report.method,
        report.seeds.len(),
        report.failed_seeds.len()
    );
    for row in &report.rows {
        println!(
            "  {} lf={} {}: {:.4} +- {:.4} (n={})",
            row.arch, row.label_fraction, row.metric, row.mean, row.ci95_halfwidth, row.n
        );
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, seed, out } => {
            let cfg = load_config(&config, out)?;
            let seed = seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0));
            let (record, checkpoints) = experiment::pretrain_seed(&cfg, seed)?;
            println!("pretrained seed {seed}: status {:?}", record.status);
            if let Some(last) = record.loss_curve.last() {
                println!("  final epoch loss {last:.6}");
            }
            for (variant, path) in checkpoints {
                println!("  {} -> {}", variant, path.display());
            }
        }
        Command::Finetune {
            config,
            checkpoint,
            seed,
            label_fraction,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            let seed = seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0));
            let out = out.unwrap_or_else(|| cfg.resolve_out_dir().join("finetune"));
            let outcome =
                experiment::finetune_checkpoint(&cfg, &checkpoint, seed, label_fraction, &out)?;
            println!(
                "fine-tuned seed {seed} at {label_fraction} labels; best epoch {}",
                outcome.best_epoch
            );
            for metric in &outcome.test_metrics {
                println!("  {}: {:.4}", metric.metric_name, metric.value);
            }
            println!("  checkpoint {}", outcome.checkpoint.display());
        }
        Command::Run { config, seed, out } => {
            let mut cfg = load_config(&config, out)?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            let outcome = experiment::run(&cfg)?;
            print_aggregate(&outcome.aggregate);
            println!("results in {}", outcome.dir.display());
        }
        Command::Sweep { config, out } => {
            let cfg = load_config(&config, out)?;
            let report = experiment::sweep(&cfg)?;
            println!("sweep over {:?}: {} cells", report.axis, report.cells.len());
            for cell in &report.cells {
                println!("cell {}:", cell.label);
                print_aggregate(&cell.aggregate);
            }
        }
        Command::CompareCost {
            cass_config,
            dino_config,
            out,
        } => {
            let cass_cfg = load_config(&cass_config, None)?;
            let dino_cfg = load_config(&dino_config, None)?;
            let out = out.unwrap_or_else(|| cass_cfg.resolve_out_dir().join("compare_cost"));
            let report = experiment::compare_cost(&cass_cfg, &dino_cfg, &out)?;
            println!(
                "cass: {:.2}s, {} augmentations, {} copies",
                report.cass.total_wall_clock,
                report.cass.counters.augmentation_applications,
                report.cass.counters.parameter_copy_ops
            );
            println!(
                "dino: {:.2}s, {} augmentations, {} copies",
                report.dino.total_wall_clock,
                report.dino.counters.augmentation_applications,
                report.dino.counters.parameter_copy_ops
            );
            println!(
                "wall-clock ratio {:.2}, time saved {:.1}%",
                report.wall_clock_ratio,
                100.0 * report.time_saved_fraction
            );
        }
        Command::Report { from, out } => {
            let out = out.unwrap_or_else(|| from.clone());
            let sweep_json = from.join("sweep_report.json");
            let aggregate_json = from.join("aggregate.json");
            let path = if sweep_json.exists() {
                experiment::report_sweep(&SweepReport::load(&sweep_json)?, &out)?
            } else if aggregate_json.exists() {
                experiment::report_run(&AggregateReport::load(&aggregate_json)?, &out)?
            } else {
                return Err(CassError::InvalidInput(format!(
                    "{} holds neither aggregate.json nor sweep_report.json",
                    from.display()
                )));
            };
            println!("report written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
