//! Unsupervised inference of the mix-rate lower bound.
//!
//! Target labels never reveal the true disagreement rate, so the bound is
//! inferred from behavior: train across a triangular grid of
//! (minimum group bound, total bound) pairs, smooth the per-run total
//! validation losses with a Gaussian kernel, and pick the largest total
//! bound whose smoothed loss still sits in the low percentile band. The
//! validation loss of each run is computed at that run's own assumed bound,
//! which is what makes the surface rise once the assumed bound passes the
//! true rate: no model can place that much probability mass on disagreement
//! groups that are not there.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{CoreError, Result};
use crate::trainer::{train, Method, RunIo, RunStatus, TrainConfig};

/// Grid of assumed bounds crossed with training seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Candidate total lower bounds.
    pub totals: Vec<f64>,
    /// Candidate minimum per-group bounds.
    pub mins: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.totals.is_empty() || self.mins.is_empty() || self.seeds.is_empty() {
            return Err(CoreError::config("grid needs totals, mins, and seeds"));
        }
        let ok = |v: &f64| v.is_finite() && (0.0..=1.0).contains(v);
        if !self.totals.iter().all(ok) || !self.mins.iter().all(ok) {
            return Err(CoreError::config("grid bounds must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Triangular grid points (min, total) with two active groups: the
    /// minimum group bound cannot exceed an even split of the total. The
    /// second list holds the skipped non-triangular combinations.
    pub fn points(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let mut points = Vec::new();
        let mut skipped = Vec::new();
        for &total in &self.totals {
            for &min in &self.mins {
                if min <= total / 2.0 + 1e-12 {
                    points.push((min, total));
                } else {
                    skipped.push((min, total));
                }
            }
        }
        points.sort_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap());
        skipped.sort_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap());
        (points, skipped)
    }

    /// Smallest positive gap between neighboring grid values on either axis.
    pub fn spacing(&self) -> f64 {
        let axis_gap = |vals: &[f64]| -> f64 {
            let mut v = vals.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.windows(2)
                .map(|w| w[1] - w[0])
                .filter(|&g| g > 1e-12)
                .fold(f64::INFINITY, f64::min)
        };
        let g = axis_gap(&self.totals).min(axis_gap(&self.mins));
        if g.is_finite() {
            g
        } else {
            // Degenerate single-value grid; any positive scale works.
            0.1
        }
    }

    /// The smoother is config-exposed; this is the documented default of
    /// half the grid spacing.
    pub fn default_bandwidth(&self) -> f64 {
        0.5 * self.spacing()
    }
}

/// One completed training run of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub min_bound: f64,
    pub total_bound: f64,
    pub seed: u64,
    /// Total validation loss at the run's selected checkpoint, evaluated at
    /// the run's own assumed bounds.
    pub val_total_loss: f64,
    pub val_source_loss: f64,
    pub diverse_gen_error: f64,
    pub worst_group_accuracy: f64,
    pub diverged: bool,
}

const SWEEP_HEADER: &str = "min_bound,total_bound,seed,val_total_loss,val_source_loss,diverse_gen_error,worst_group_accuracy,diverged";

impl SweepRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.min_bound,
            self.total_bound,
            self.seed,
            self.val_total_loss,
            self.val_source_loss,
            self.diverse_gen_error,
            self.worst_group_accuracy,
            self.diverged
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(CoreError::config(format!("bad sweep row: {line}")));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| CoreError::config(format!("bad float in sweep row: {s}")))
        };
        Ok(SweepRow {
            min_bound: f(parts[0])?,
            total_bound: f(parts[1])?,
            seed: parts[2]
                .parse()
                .map_err(|_| CoreError::config(format!("bad seed in sweep row: {}", parts[2])))?,
            val_total_loss: f(parts[3])?,
            val_source_loss: f(parts[4])?,
            diverse_gen_error: f(parts[5])?,
            worst_group_accuracy: f(parts[6])?,
            diverged: parts[7] == "true",
        })
    }

    fn key(&self) -> (u64, u64, u64) {
        (self.min_bound.to_bits(), self.total_bound.to_bits(), self.seed)
    }
}

/// Result of a sweep: completed rows plus the grid combinations skipped for
/// violating triangularity.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<(f64, f64)>,
}

/// Train one run per (grid point, seed) and collect the loss table.
///
/// Every run shares the dataset. The template must use the top-k method;
/// each grid point overrides its bounds with the pair
/// (group (0,1) <- total - min, group (1,0) <- min), so the minimum bound
/// always lands on group (1,0) and the remainder on (0,1).
///
/// When `csv_path` is given, finished rows are appended immediately and an
/// existing file's rows are reused instead of retrained, so an interrupted
/// sweep resumes where it stopped. The file is rewritten in sorted order at
/// the end; the final table is identical however often the sweep restarts.
pub fn sweep_grid(
    bundle: &DatasetBundle,
    template: &TrainConfig,
    grid: &GridSpec,
    csv_path: Option<&Path>,
) -> Result<SweepTable> {
    grid.validate()?;
    template.validate()?;
    if template.method != Method::Ace {
        return Err(CoreError::config("mix-rate sweeps train the top-k method"));
    }
    if template.mix.active_groups.len() != 2 {
        return Err(CoreError::config(
            "the triangular sweep assumes exactly two active groups",
        ));
    }

    let (points, skipped) = grid.points();
    let mut done: BTreeMap<(u64, u64, u64), SweepRow> = BTreeMap::new();
    if let Some(path) = csv_path {
        if path.exists() {
            for line in BufReader::new(std::fs::File::open(path)?).lines() {
                let line = line?;
                if line.is_empty() || line == SWEEP_HEADER {
                    continue;
                }
                let row = SweepRow::from_csv(&line)?;
                done.insert(row.key(), row);
            }
        }
    }

    let jobs: Vec<(f64, f64, u64)> = points
        .iter()
        .flat_map(|&(min, total)| grid.seeds.iter().map(move |&s| (min, total, s)))
        .filter(|&(min, total, s)| !done.contains_key(&(min.to_bits(), total.to_bits(), s)))
        .collect();

    let sink = match csv_path {
        Some(path) => {
            let fresh = !path.exists();
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            if fresh {
                writeln!(file, "{SWEEP_HEADER}")?;
            }
            Some(std::sync::Mutex::new(file))
        }
        None => None,
    };

    let fresh_rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(min, total, seed)| -> Result<SweepRow> {
            let row = run_grid_point(bundle, template, min, total, seed)?;
            if let Some(sink) = &sink {
                let mut file = sink.lock().expect("sweep sink poisoned");
                writeln!(file, "{}", row.to_csv())?;
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<SweepRow> = done.into_values().chain(fresh_rows).collect();
    rows.sort_by(|a, b| {
        (a.total_bound, a.min_bound, a.seed)
            .partial_cmp(&(b.total_bound, b.min_bound, b.seed))
            .unwrap()
    });

    if let Some(path) = csv_path {
        let mut out = String::from(SWEEP_HEADER);
        for row in &rows {
            out.push('\n');
            out.push_str(&row.to_csv());
        }
        out.push('\n');
        std::fs::write(path, out)?;
    }
    Ok(SweepTable { rows, skipped })
}

fn run_grid_point(
    bundle: &DatasetBundle,
    template: &TrainConfig,
    min: f64,
    total: f64,
    seed: u64,
) -> Result<SweepRow> {
    let mut cfg = template.clone();
    cfg.mix.lower_bound = total;
    cfg.mix.group_bounds = Some(vec![total - min, min]);
    let record = train(bundle, &cfg, seed, &RunIo::default())?;
    let (diverged, val_total, val_src, err, worst) = match (&record.status, record.epochs.last()) {
        (RunStatus::Completed, Some(_)) => {
            let best = &record.epochs[record.best_epoch];
            let test = record
                .final_test
                .as_ref()
                .ok_or_else(|| CoreError::state("completed run lacks test metrics"))?;
            (
                false,
                best.val_total_loss,
                best.val_source_loss,
                test.diverse_gen_error,
                test.worst_group_accuracy,
            )
        }
        _ => (true, f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(SweepRow {
        min_bound: min,
        total_bound: total,
        seed,
        val_total_loss: val_total,
        val_source_loss: val_src,
        diverse_gen_error: err,
        worst_group_accuracy: worst,
        diverged,
    })
}

/// Smoothed loss value at a lattice point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub min_bound: f64,
    pub total_bound: f64,
    pub loss: f64,
}

/// Nadaraya-Watson estimate of the validation loss over the bound plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSurface {
    pub bandwidth: f64,
    /// Lattice points sorted by (total, min).
    pub points: Vec<SurfacePoint>,
}

/// Lattice resolution for the smoothed surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub total_steps: usize,
    pub min_steps: usize,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        LatticeSpec {
            total_steps: 33,
            min_steps: 33,
        }
    }
}

fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 || hi - lo <= 1e-15 {
        return vec![lo];
    }
    (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect()
}

/// Smooth the sweep losses with an isotropic Gaussian kernel and evaluate on
/// a dense triangular lattice spanning the observed bounds. Diverged rows
/// carry no loss and are ignored.
pub fn density_estimate(
    rows: &[SweepRow],
    bandwidth: f64,
    lattice: LatticeSpec,
) -> Result<LossSurface> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(CoreError::config("bandwidth must be positive and finite"));
    }
    let samples: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.val_total_loss.is_finite())
        .collect();
    if samples.len() < 4 {
        return Err(CoreError::config(
            "density estimation needs at least four finite sweep rows",
        ));
    }
    let bound = |f: fn(&SweepRow) -> f64| -> (f64, f64) {
        samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(f(r)), hi.max(f(r)))
            })
    };
    let (t_lo, t_hi) = bound(|r| r.total_bound);
    let (m_lo, m_hi) = bound(|r| r.min_bound);

    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut points = Vec::new();
    for &total in &linspace(t_lo, t_hi, lattice.total_steps) {
        for &min in &linspace(m_lo, m_hi, lattice.min_steps) {
            if min > total / 2.0 + 1e-12 {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for r in &samples {
                let dt = r.total_bound - total;
                let dm = r.min_bound - min;
                let w = (-(dt * dt + dm * dm) * inv).exp();
                num += w * r.val_total_loss;
                den += w;
            }
            // A positive kernel never vanishes at finite distance, but very
            // narrow bandwidths can underflow; fall back to the nearest
            // sample in that case.
            let loss = if den > 0.0 {
                num / den
            } else {
                samples
                    .iter()
                    .map(|r| {
                        let dt = r.total_bound - total;
                        let dm = r.min_bound - min;
                        (dt * dt + dm * dm, r.val_total_loss)
                    })
                    .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                    .map(|(_, l)| l)
                    .unwrap()
            };
            points.push(SurfacePoint {
                min_bound: min,
                total_bound: total,
                loss,
            });
        }
    }
    points.sort_by(|a, b| {
        (a.total_bound, a.min_bound)
            .partial_cmp(&(b.total_bound, b.min_bound))
            .unwrap()
    });
    Ok(LossSurface { bandwidth, points })
}

/// Empirical percentile with the floor((len - 1) * p / 100) index rule over
/// ascending values.
pub fn percentile_threshold(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::config("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(CoreError::config("percentile must lie in [0, 100]"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((v.len() - 1) as f64 * percentile / 100.0).floor() as usize;
    Ok(v[idx])
}

/// The chosen bound pair plus the evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub min_bound: f64,
    pub total_bound: f64,
    pub smoothed_loss: f64,
    pub threshold: f64,
    pub percentile: f64,
    /// Set when the admissible set was empty and the global minimum was
    /// returned instead.
    pub fallback: bool,
    /// The percentile cutoff is a heuristic carried over as-is; there is no
    /// principled derivation behind the default of 20.
    pub note: String,
}

/// Pick the largest total bound whose smoothed loss stays within the given
/// percentile of the surface's loss distribution; ties prefer the larger
/// minimum bound. Deterministic in the surface.
pub fn select_lower_bound(surface: &LossSurface, percentile: f64) -> Result<Selection> {
    if surface.points.is_empty() {
        return Err(CoreError::config("selection needs a nonempty surface"));
    }
    let losses: Vec<f64> = surface.points.iter().map(|p| p.loss).collect();
    let threshold = percentile_threshold(&losses, percentile)?;
    let admissible = surface.points.iter().filter(|p| p.loss <= threshold);
    let pick = admissible.max_by(|a, b| {
        (a.total_bound, a.min_bound)
            .partial_cmp(&(b.total_bound, b.min_bound))
            .unwrap()
    });
    let (point, fallback) = match pick {
        Some(p) => (*p, false),
        None => (
            *surface
                .points
                .iter()
                .min_by(|a, b| {
                    (a.loss, a.total_bound, a.min_bound)
                        .partial_cmp(&(b.loss, b.total_bound, b.min_bound))
                        .unwrap()
                })
                .expect("surface is nonempty"),
            true,
        ),
    };
    Ok(Selection {
        min_bound: point.min_bound,
        total_bound: point.total_bound,
        smoothed_loss: point.loss,
        threshold,
        percentile,
        fallback,
        note: "percentile cutoff is the heuristic default, not a derived quantity".to_string(),
    })
}
