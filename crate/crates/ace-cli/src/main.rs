use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use ace_cli::config::ExperimentConfig;
use ace_cli::report::{correlation_rows, write_report};
use ace_cli::runs::{execute, load_run_files, RunSpec, SeedPlan};
use ace_cli::suites::{run_suite, sweep_table, SUITES};

#[derive(Parser)]
#[command(
    name = "ace",
    version,
    about = "Train and evaluate disagreement-seeking classifier ensembles"
)]
struct Cli {
    /// Worker threads for suite execution (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single run from the config's [train] section.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Master seed; dataset and training seeds derive from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Results directory (default: runs/train-<unix time>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep a checkpoint per epoch instead of only the selected one.
        #[arg(long)]
        keep_all: bool,
    },
    /// Run an experiment suite: cross-product of methods, rates, and seeds.
    Suite {
        /// One of: mixrate-robustness, incomplete, ablation-schedule,
        /// ablation-grouploss, val-correlation, mixrate-inference,
        /// verify-scoring.
        tag: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        keep_all: bool,
    },
    /// Train across the [sweep] bound grid and write the loss table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full mix-rate inference: sweep, smooth, and select a lower bound.
    InferMixrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check properness of the target losses on small discrete worlds.
    VerifyScoring {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate validation losses with test error across a run directory.
    Report {
        /// Directory holding per-run JSON files (or its parent).
        #[arg(long)]
        runs: PathBuf,
        /// Output CSV path (default: <runs>/report.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(explicit: Option<PathBuf>, verb: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from("runs").join(format!("{verb}-{stamp}"))
    })
}

fn empty_config() -> ExperimentConfig {
    ExperimentConfig {
        data: None,
        run: Default::default(),
        train: None,
        sweep: None,
    }
}

fn train_one(config: &Path, seed: u64, out: PathBuf, keep_all: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = cfg.data()?;
    let section = cfg
        .train
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("the train verb needs a [train] section"))?;
    let mut train = ace_cli::config::preset(&section.preset)?;
    if let Some(epochs) = cfg.run.epochs {
        ace_cli::config::override_epochs(&mut train, epochs);
    }
    let plan = SeedPlan::new(seed);
    let label = section
        .preset
        .split_once('-')
        .map_or(section.preset.as_str(), |(_, v)| v)
        .to_string();
    let spec = RunSpec {
        dataset: data.dataset.clone(),
        method_label: label,
        mix_rate: section.mix_rate,
        incomplete_rate: section.incomplete_rate,
        dataset_config: data.dataset_config(
            section.mix_rate,
            section.incomplete_rate,
            plan.dataset_seed(0, 0),
        )?,
        sizes: data.sizes(),
        train,
        seed: plan.train_seed(0),
    };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let file = execute(&spec, &out, keep_all)?;
    println!("{}", serde_json::to_string_pretty(&file)?);
    eprintln!("run written under {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("configuring the worker pool")?;
    }

    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            keep_all,
        } => train_one(&config, seed, out_dir(out, "train"), keep_all),
        Command::Suite {
            tag,
            config,
            seed,
            out,
            keep_all,
        } => {
            anyhow::ensure!(
                SUITES.contains(&tag.as_str()),
                "unknown suite {tag:?} (known: {})",
                SUITES.join(", ")
            );
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(out, &tag);
            let outcome = run_suite(&tag, &cfg, seed, &dir, keep_all)?;
            println!(
                "suite {tag}: {} runs, {} failures, results under {}",
                outcome.runs,
                outcome.failures,
                outcome.out_dir.display()
            );
            anyhow::ensure!(outcome.failures == 0, "{} cells failed", outcome.failures);
            Ok(())
        }
        Command::Sweep { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(out, "sweep");
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            let table = sweep_table(&cfg, seed, Some(&dir.join("sweep.csv")))?;
            println!(
                "sweep: {} rows ({} skipped), table at {}",
                table.rows.len(),
                table.skipped.len(),
                dir.join("sweep.csv").display()
            );
            Ok(())
        }
        Command::InferMixrate { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(out, "infer-mixrate");
            let outcome = run_suite("mixrate-inference", &cfg, seed, &dir, false)?;
            println!(
                "inference: {} sweep runs, results under {}",
                outcome.runs,
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::VerifyScoring { out } => {
            let dir = out_dir(out, "verify-scoring");
            let outcome = run_suite("verify-scoring", &empty_config(), 0, &dir, false)?;
            anyhow::ensure!(
                outcome.failures == 0,
                "{} properness checks failed",
                outcome.failures
            );
            println!("all {} properness checks passed", outcome.runs);
            Ok(())
        }
        Command::Report { runs, out } => {
            let files: Vec<_> = load_run_files(&runs)?
                .into_iter()
                .map(|(_, f)| f)
                .collect();
            anyhow::ensure!(!files.is_empty(), "no run files under {}", runs.display());
            let rows = correlation_rows(&files);
            let path = out.unwrap_or_else(|| runs.join("report.csv"));
            write_report(&rows, &path)?;
            println!("{} correlation rows at {}", rows.len(), path.display());
            Ok(())
        }
    }
}
