//! Correlation study between validation losses and test error.
//!
//! For each run with per-epoch test metrics, the report computes the Pearson
//! correlation across epoch checkpoints between the test error and (a) the
//! total validation loss and (b) the source-only validation loss. A reliable
//! selection signal shows a strongly positive correlation: low validation
//! loss then means low test error.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use crate::runs::RunFile;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub dataset: String,
    pub method: String,
    pub mix_rate: f64,
    pub seed: u64,
    /// Which validation series was correlated with test error.
    pub series: String,
    pub checkpoints: usize,
    /// Empty when flagged.
    pub pearson: Option<f64>,
    /// "", "insufficient-checkpoints", or "constant-series".
    pub flag: String,
}

pub const REPORT_HEADER: &str = "dataset,method,mix_rate,seed,series,checkpoints,pearson,flag";

impl CorrelationRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.dataset,
            self.method,
            self.mix_rate,
            self.seed,
            self.series,
            self.checkpoints,
            self.pearson.map(|p| p.to_string()).unwrap_or_default(),
            self.flag
        )
    }
}

/// Pearson correlation; undefined for short or constant series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Correlation rows for a set of runs. Runs without per-epoch test metrics
/// or too few checkpoints yield flagged rows instead of numbers.
pub fn correlation_rows(files: &[RunFile]) -> Vec<CorrelationRow> {
    let mut rows = Vec::new();
    for file in files {
        let epochs = &file.record.epochs;
        let errors: Vec<f64> = epochs
            .iter()
            .filter_map(|e| e.test.as_ref().map(|t| t.diverse_gen_error))
            .collect();
        for (series, losses) in [
            (
                "total_val_loss",
                epochs.iter().map(|e| e.val_total_loss).collect::<Vec<f64>>(),
            ),
            (
                "source_val_loss",
                epochs.iter().map(|e| e.val_source_loss).collect::<Vec<f64>>(),
            ),
        ] {
            let n = errors.len().min(losses.len());
            let mut row = CorrelationRow {
                dataset: file.dataset.clone(),
                method: file.method.clone(),
                mix_rate: file.mix_rate,
                seed: file.record.seed,
                series: series.to_string(),
                checkpoints: n,
                pearson: None,
                flag: String::new(),
            };
            if n < 3 {
                row.flag = "insufficient-checkpoints".to_string();
            } else {
                match pearson(&losses[..n], &errors[..n]) {
                    Some(r) => row.pearson = Some(r),
                    None => row.flag = "constant-series".to_string(),
                }
            }
            rows.push(row);
        }
    }
    rows.sort_by(|a, b| {
        (&a.dataset, &a.method, a.mix_rate, a.seed, &a.series)
            .partial_cmp(&(&b.dataset, &b.method, b.mix_rate, b.seed, &b.series))
            .expect("report keys are totally ordered")
    });
    rows
}

pub fn write_report(rows: &[CorrelationRow], path: &Path) -> Result<()> {
    let mut text = String::from(REPORT_HEADER);
    for row in rows {
        text.push('\n');
        text.push_str(&row.to_csv());
    }
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pearson_handles_the_canonical_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let up = [2.0, 4.0, 6.0, 8.0];
        let down = [8.0, 6.0, 4.0, 2.0];
        assert_relative_eq!(pearson(&xs, &up).unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(pearson(&xs, &down).unwrap(), -1.0, max_relative = 1e-12);
        assert_eq!(pearson(&xs, &[1.0, 1.0, 1.0, 1.0]), None);
        assert_eq!(pearson(&xs[..2], &up[..2]), None);
    }

    #[test]
    fn pearson_is_scale_invariant() {
        let xs = [1.0, 5.0, 2.0, 8.0, 3.0];
        let ys = [0.3, 0.9, 0.1, 0.8, 0.4];
        let scaled: Vec<f64> = ys.iter().map(|y| 100.0 * y + 7.0).collect();
        assert_relative_eq!(
            pearson(&xs, &ys).unwrap(),
            pearson(&xs, &scaled).unwrap(),
            max_relative = 1e-12
        );
    }
}
