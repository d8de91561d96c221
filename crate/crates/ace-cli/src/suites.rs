//! Experiment suites: cross-products of (dataset, method, rate, seed) cells
//! executed concurrently, aggregated into one CSV, and summarized as SVG.
//!
//! Every suite derives its seeds from one master seed. Dataset seeds depend
//! only on the (mix rate, incomplete rate) cell, so methods and replicates
//! within a cell train on identical data and comparisons are paired.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use ace_core::data::generate_bundle;
use ace_core::mixrate::{
    density_estimate, select_lower_bound, sweep_grid, GridSpec, LatticeSpec, SweepTable,
};
use ace_core::objectives::Aggregation;
use ace_core::scoring::{verify_proper, LossTag, Verdict};
use ace_core::trainer::{EarlyStopping, Method, RunStatus};

use crate::config::{override_epochs, preset, ExperimentConfig};
use crate::plot::{heatmap, line_chart, Series};
use crate::report::{correlation_rows, write_report};
use crate::runs::{execute, gain_rows, rows_for, write_aggregate, RunFile, RunSpec, SeedPlan};

pub const SUITES: &[&str] = &[
    "mixrate-robustness",
    "incomplete",
    "ablation-schedule",
    "ablation-grouploss",
    "val-correlation",
    "mixrate-inference",
    "verify-scoring",
];

#[derive(Debug)]
pub struct SuiteOutcome {
    pub out_dir: PathBuf,
    pub runs: usize,
    pub failures: usize,
}

/// One point of the experiment cross-product before seeding.
struct Cell {
    label: String,
    train: ace_core::trainer::TrainConfig,
    mix_rate: f64,
    mix_index: usize,
    incomplete_rate: f64,
    incomplete_index: usize,
}

pub fn run_suite(
    tag: &str,
    cfg: &ExperimentConfig,
    master_seed: u64,
    out_dir: &Path,
    keep_all: bool,
) -> Result<SuiteOutcome> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;

    match tag {
        "mixrate-robustness" | "val-correlation" => {
            training_suite(tag, cfg, master_seed, out_dir, keep_all)
        }
        "incomplete" => incomplete_suite(cfg, master_seed, out_dir, keep_all),
        "ablation-schedule" | "ablation-grouploss" => {
            ablation_suite(tag, cfg, master_seed, out_dir, keep_all)
        }
        "mixrate-inference" => inference_suite(cfg, master_seed, out_dir),
        "verify-scoring" => scoring_suite(out_dir),
        other => bail!("unknown suite {other:?} (known: {})", SUITES.join(", ")),
    }
}

/// Presets from the config, or the dataset's four diverse methods.
fn resolve_presets(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let names = if cfg.run.presets.is_empty() {
        let ds = &cfg.data()?.dataset;
        ["ace01", "ace05", "divdis", "dbat"]
            .iter()
            .map(|v| format!("{ds}-{v}"))
            .collect()
    } else {
        cfg.run.presets.clone()
    };
    for name in &names {
        preset(name)?;
    }
    Ok(names)
}

/// The method label is the preset's variant part; the dataset prefix is
/// redundant with the dataset column.
fn variant_label(preset_name: &str) -> String {
    preset_name
        .split_once('-')
        .map_or_else(|| preset_name.to_string(), |(_, v)| v.to_string())
}

fn specs_for_cells(cfg: &ExperimentConfig, cells: Vec<Cell>, master: u64) -> Result<Vec<RunSpec>> {
    let data = cfg.data()?;
    let plan = SeedPlan::new(master);
    let sizes = data.sizes();
    let mut specs = Vec::new();
    for cell in cells {
        let dataset_config = data.dataset_config(
            cell.mix_rate,
            cell.incomplete_rate,
            plan.dataset_seed(cell.mix_index, cell.incomplete_index),
        )?;
        for r in 0..cfg.run.seeds {
            specs.push(RunSpec {
                dataset: data.dataset.clone(),
                method_label: cell.label.clone(),
                mix_rate: cell.mix_rate,
                incomplete_rate: cell.incomplete_rate,
                dataset_config: dataset_config.clone(),
                sizes: sizes.clone(),
                train: cell.train.clone(),
                seed: plan.train_seed(r),
            });
        }
    }
    Ok(specs)
}

/// Run every spec concurrently. Per-cell errors are recorded and the suite
/// continues; divergence is not an error (it lands in the run record).
fn execute_all(specs: &[RunSpec], out_dir: &Path, keep_all: bool) -> (Vec<RunFile>, Vec<String>) {
    let failures = Mutex::new(Vec::new());
    let mut files: Vec<(usize, RunFile)> = specs
        .par_iter()
        .enumerate()
        .filter_map(|(i, spec)| match execute(spec, out_dir, keep_all) {
            Ok(file) => {
                eprintln!(
                    "done {} mix {} inc {} seed {}",
                    spec.method_label, spec.mix_rate, spec.incomplete_rate, spec.seed
                );
                Some((i, file))
            }
            Err(err) => {
                let line = format!(
                    "{} mix {} inc {} seed {}: {err:#}",
                    spec.method_label, spec.mix_rate, spec.incomplete_rate, spec.seed
                );
                eprintln!("FAILED {line}");
                failures.lock().unwrap().push(line);
                None
            }
        })
        .collect();
    files.sort_by_key(|(i, _)| *i);
    let mut failures = failures.into_inner().unwrap();
    failures.sort();
    (files.into_iter().map(|(_, f)| f).collect(), failures)
}

fn finish_training_suite(
    files: &[RunFile],
    failures: Vec<String>,
    out_dir: &Path,
    x_axis: XAxis,
) -> Result<SuiteOutcome> {
    let mut rows: Vec<_> = files.iter().flat_map(rows_for).collect();
    let gains = gain_rows(&rows, "erm");
    rows.extend(gains);
    write_aggregate(&mut rows, &out_dir.join("aggregate.csv"))?;
    summary_plot(files, x_axis, &out_dir.join("summary.svg"))?;
    if !failures.is_empty() {
        std::fs::write(out_dir.join("failures.txt"), failures.join("\n") + "\n")?;
    }
    Ok(SuiteOutcome {
        out_dir: out_dir.to_path_buf(),
        runs: files.len(),
        failures: failures.len(),
    })
}

fn training_suite(
    tag: &str,
    cfg: &ExperimentConfig,
    master: u64,
    out_dir: &Path,
    keep_all: bool,
) -> Result<SuiteOutcome> {
    let data = cfg.data()?;
    let presets = resolve_presets(cfg)?;
    let per_epoch = tag == "val-correlation";
    let mut cells = Vec::new();
    for name in &presets {
        for (mi, &mix) in data.mix_rates.iter().enumerate() {
            let mut train = preset(name)?;
            if let Some(epochs) = cfg.run.epochs {
                override_epochs(&mut train, epochs);
            }
            train.per_epoch_test_metrics = per_epoch;
            cells.push(Cell {
                label: variant_label(name),
                train,
                mix_rate: mix,
                mix_index: mi,
                incomplete_rate: 0.0,
                incomplete_index: 0,
            });
        }
    }
    let specs = specs_for_cells(cfg, cells, master)?;
    let (files, failures) = execute_all(&specs, out_dir, keep_all);
    if per_epoch {
        let inner: Vec<RunFile> = files.to_vec();
        write_report(&correlation_rows(&inner), &out_dir.join("report.csv"))?;
    }
    finish_training_suite(&files, failures, out_dir, XAxis::MixRate)
}

/// Incomplete-correlation study: the source carries disagreement mass at the
/// listed rates while the target mix rate stays at the first configured
/// value. Scheduling is off for every method and the disagreement method
/// selects checkpoints by source validation accuracy.
fn incomplete_suite(
    cfg: &ExperimentConfig,
    master: u64,
    out_dir: &Path,
    keep_all: bool,
) -> Result<SuiteOutcome> {
    let data = cfg.data()?;
    if data.incomplete_rates.is_empty() {
        bail!("the incomplete suite needs data.incomplete_rates");
    }
    let presets = resolve_presets(cfg)?;
    let mix = data.mix_rates[0];
    let mut cells = Vec::new();
    for name in &presets {
        for (ii, &inc) in data.incomplete_rates.iter().enumerate() {
            let mut train = preset(name)?;
            if let Some(epochs) = cfg.run.epochs {
                override_epochs(&mut train, epochs);
            }
            train.scheduling = false;
            if train.method == Method::Dbat {
                train.early_stopping = EarlyStopping::SourceValidationAccuracy;
            }
            cells.push(Cell {
                label: format!("{}+inc{}", variant_label(name), inc),
                train,
                mix_rate: mix,
                mix_index: 0,
                incomplete_rate: inc,
                incomplete_index: ii,
            });
        }
    }
    let specs = specs_for_cells(cfg, cells, master)?;
    let (files, failures) = execute_all(&specs, out_dir, keep_all);
    finish_training_suite(&files, failures, out_dir, XAxis::IncompleteRate)
}

/// Scheduling and group-loss ablations. Both compare two top-k variants per
/// preset at each configured mix rate.
fn ablation_suite(
    tag: &str,
    cfg: &ExperimentConfig,
    master: u64,
    out_dir: &Path,
    keep_all: bool,
) -> Result<SuiteOutcome> {
    let data = cfg.data()?;
    let presets = if cfg.run.presets.is_empty() {
        vec![
            format!("{}-ace01", data.dataset),
            format!("{}-ace05", data.dataset),
        ]
    } else {
        cfg.run.presets.clone()
    };
    let mut cells = Vec::new();
    for name in &presets {
        let base = preset(name)?;
        if base.method != Method::Ace {
            bail!("{tag} compares top-k variants; preset {name:?} is not one");
        }
        for (mi, &mix) in data.mix_rates.iter().enumerate() {
            let variants: [(String, Box<dyn Fn(&mut ace_core::trainer::TrainConfig)>); 2] =
                if tag == "ablation-schedule" {
                    [
                        ("+sched".to_string(), Box::new(|t| t.scheduling = true)),
                        ("+nosched".to_string(), Box::new(|t| t.scheduling = false)),
                    ]
                } else {
                    [
                        (
                            "+pergroup".to_string(),
                            Box::new(|t| t.mix.aggregation = Aggregation::PerGroup),
                        ),
                        (
                            "+aggregated".to_string(),
                            Box::new(|t| t.mix.aggregation = Aggregation::GroupAggregated),
                        ),
                    ]
                };
            for (suffix, tweak) in &variants {
                let mut train = base.clone();
                if let Some(epochs) = cfg.run.epochs {
                    override_epochs(&mut train, epochs);
                }
                tweak(&mut train);
                cells.push(Cell {
                    label: format!("{}{}", variant_label(name), suffix),
                    train,
                    mix_rate: mix,
                    mix_index: mi,
                    incomplete_rate: 0.0,
                    incomplete_index: 0,
                });
            }
        }
    }
    let specs = specs_for_cells(cfg, cells, master)?;
    let (files, failures) = execute_all(&specs, out_dir, keep_all);
    finish_training_suite(&files, failures, out_dir, XAxis::MixRate)
}

/// Mix-rate inference: sweep the triangular bound grid on one dataset, smooth
/// the validation losses, and apply the percentile selection heuristic.
fn inference_suite(cfg: &ExperimentConfig, master: u64, out_dir: &Path) -> Result<SuiteOutcome> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("mixrate-inference needs a [sweep] section"))?;
    let table = sweep_table(cfg, master, Some(&out_dir.join("sweep.csv")))?;

    let grid = GridSpec {
        totals: sweep.totals.clone(),
        mins: sweep.mins.clone(),
        seeds: vec![0],
    };
    let bandwidth = sweep.bandwidth.unwrap_or_else(|| grid.default_bandwidth());
    let surface = density_estimate(&table.rows, bandwidth, LatticeSpec::default())?;

    let mut csv = String::from("total_bound,min_bound,smoothed_loss");
    for p in &surface.points {
        csv.push_str(&format!("\n{},{},{}", p.total_bound, p.min_bound, p.loss));
    }
    csv.push('\n');
    std::fs::write(out_dir.join("surface.csv"), csv)?;

    let cells: Vec<(f64, f64, f64)> = surface
        .points
        .iter()
        .map(|p| (p.total_bound, p.min_bound, p.loss))
        .collect();
    heatmap(
        &out_dir.join("surface.svg"),
        "smoothed validation loss over assumed bounds",
        "total lower bound",
        "minimum group lower bound",
        &cells,
    )?;

    let selection = select_lower_bound(&surface, sweep.percentile)?;
    std::fs::write(
        out_dir.join("selection.json"),
        serde_json::to_string_pretty(&selection)?,
    )?;
    println!(
        "selected total bound {:.4} (min group {:.4}), smoothed loss {:.4}, threshold {:.4}{}",
        selection.total_bound,
        selection.min_bound,
        selection.smoothed_loss,
        selection.threshold,
        if selection.fallback {
            " [fallback: empty admissible set]"
        } else {
            ""
        }
    );

    let diverged = table.rows.iter().filter(|r| r.diverged).count();
    Ok(SuiteOutcome {
        out_dir: out_dir.to_path_buf(),
        runs: table.rows.len(),
        failures: diverged,
    })
}

/// The sweep table alone, shared by the `sweep` verb and the inference suite.
pub fn sweep_table(
    cfg: &ExperimentConfig,
    master: u64,
    csv_path: Option<&Path>,
) -> Result<SweepTable> {
    let data = cfg.data()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("sweeping needs a [sweep] section"))?;
    let plan = SeedPlan::new(master);
    let dataset_config = data.dataset_config(sweep.true_mix, 0.0, plan.dataset_seed(0, 0))?;
    let bundle = generate_bundle(&dataset_config, &data.sizes())?;

    let mut template = preset(&sweep.preset)?;
    if let Some(epochs) = sweep.epochs.or(cfg.run.epochs) {
        override_epochs(&mut template, epochs);
    }
    let grid = GridSpec {
        totals: sweep.totals.clone(),
        mins: sweep.mins.clone(),
        seeds: (0..sweep.seeds).map(|r| plan.train_seed(r)).collect(),
    };
    for (min, total) in &grid.points().1 {
        eprintln!("skipping non-triangular grid point (min {min}, total {total})");
    }
    Ok(sweep_grid(&bundle, &template, &grid, csv_path)?)
}

#[derive(Debug, Serialize)]
struct ScoringOutcome {
    name: &'static str,
    group_counts: [usize; 4],
    denom: u32,
    loss: LossTag,
    expect_proper: bool,
    ok: bool,
    verdict: Verdict,
}

/// Properness checks on small discrete worlds with a 0.1 probability grid.
/// Each check pins the expected verdict; mismatches count as failures.
fn scoring_suite(out_dir: &Path) -> Result<SuiteOutcome> {
    let denom = 10;
    // World [2,2,2,2] has independent concepts (r = 0.5 splits evenly), so
    // the mutual-information loss is proper there; skewed worlds break
    // independence. The disagreement loss is proper only when every instance
    // lies in a disagreement group. The top-k loss tolerates any bounds at or
    // under the true group rates (2/8 each for the balanced world).
    let checks: Vec<(&'static str, [usize; 4], LossTag, bool)> = vec![
        ("mi-independent", [2, 2, 2, 2], LossTag::DivDis, true),
        ("mi-correlated", [3, 1, 1, 3], LossTag::DivDis, false),
        ("mi-anticorrelated", [1, 3, 3, 1], LossTag::DivDis, false),
        ("disagree-full", [0, 4, 4, 0], LossTag::Dbat, true),
        ("disagree-partial", [2, 2, 2, 2], LossTag::Dbat, false),
        (
            "topk-undershoot",
            [2, 2, 2, 2],
            LossTag::AceTopK { bounds: [0.125, 0.125] },
            true,
        ),
        (
            "topk-exact",
            [2, 2, 2, 2],
            LossTag::AceTopK { bounds: [0.25, 0.25] },
            true,
        ),
        (
            "topk-overshoot",
            [2, 2, 2, 2],
            LossTag::AceTopK { bounds: [0.375, 0.25] },
            false,
        ),
    ];

    let mut outcomes = Vec::new();
    let mut failures = 0;
    for (name, counts, tag, expect_proper) in checks {
        let world = ace_core::scoring::DiscreteWorld::from_group_counts(counts)?;
        let verdict = verify_proper(&world, denom, &tag)?;
        let ok = verdict.is_proper == expect_proper;
        if !ok {
            failures += 1;
        }
        println!(
            "{} {name}: proper={} truth={:.4} min={:.4} ({:?}, {:.0} states)",
            if ok { "pass" } else { "FAIL" },
            verdict.is_proper,
            verdict.truth_loss,
            verdict.min_loss,
            verdict.strategy,
            verdict.evaluations,
        );
        outcomes.push(ScoringOutcome {
            name,
            group_counts: counts,
            denom,
            loss: tag,
            expect_proper,
            ok,
            verdict,
        });
    }
    std::fs::write(
        out_dir.join("scoring.json"),
        serde_json::to_string_pretty(&outcomes)?,
    )?;
    Ok(SuiteOutcome {
        out_dir: out_dir.to_path_buf(),
        runs: outcomes.len(),
        failures,
    })
}

#[derive(Debug, Clone, Copy)]
enum XAxis {
    MixRate,
    IncompleteRate,
}

/// Mean multi-label accuracy per method over the suite's x axis, with
/// per-seed markers. Diverged runs carry no test metrics and are skipped.
fn summary_plot(files: &[RunFile], x_axis: XAxis, path: &Path) -> Result<()> {
    use std::collections::BTreeMap;
    let mut by_method: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for file in files {
        if matches!(file.record.status, RunStatus::Diverged { .. }) {
            continue;
        }
        let Some(test) = &file.record.final_test else {
            continue;
        };
        let x = match x_axis {
            XAxis::MixRate => file.mix_rate,
            XAxis::IncompleteRate => file.incomplete_rate,
        };
        by_method
            .entry(file.method.as_str())
            .or_default()
            .push((x, test.multilabel_mean));
    }
    let mut series = Vec::new();
    for (method, points) in by_method {
        let mut means: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
        for &(x, y) in &points {
            let entry = means.entry(x.to_bits()).or_insert((x, Vec::new()));
            entry.1.push(y);
        }
        let mut line: Vec<(f64, f64)> = means
            .values()
            .map(|(x, ys)| (*x, ys.iter().sum::<f64>() / ys.len() as f64))
            .collect();
        line.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        series.push(Series {
            name: method.to_string(),
            line,
            points,
        });
    }
    let x_label = match x_axis {
        XAxis::MixRate => "target mix rate",
        XAxis::IncompleteRate => "source disagreement rate",
    };
    line_chart(
        path,
        "multi-label accuracy",
        x_label,
        "multi-label accuracy (mean over concepts)",
        &series,
    )
}
