use std::collections::BTreeMap;
use std::io::Write;

use crate::error::Result;
use crate::models::{Direction, SupplementBand, Target};

/// MSE ratio below which an augmented configuration counts as clearly improved.
pub const THRESHOLD_RATIO: f64 = 0.85;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub study: String,
    /// Network family, or the name of a closed-form reference predictor.
    pub model: String,
    pub direction: Direction,
    pub target: Target,
    pub supplement_band: SupplementBand,
    pub repeat: usize,
    pub fold: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub initial_train_mse: f64,
    /// Test MSE of the per-element training-mean predictor.
    pub baseline_mse: f64,
    pub pixel_accuracy: Option<f64>,
    /// `100·(1 − MSE_aug/MSE_base)` against the paired unsupplemented row.
    pub reduction_percent: Option<f64>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub wall_seconds: f64,
}

/// Identity of a configuration: everything but fold and repeat.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ConfigKey {
    pub study: String,
    pub model: String,
    pub direction: Direction,
    pub target: Target,
    pub supplement_band: SupplementBand,
}

impl ReportRow {
    pub fn key(&self) -> ConfigKey {
        ConfigKey {
            study: self.study.clone(),
            model: self.model.clone(),
            direction: self.direction,
            target: self.target,
            supplement_band: self.supplement_band,
        }
    }

    fn sort_key(&self) -> (ConfigKey, usize, usize) {
        (self.key(), self.repeat, self.fold)
    }

    /// Key of the unsupplemented row this one is compared with.
    fn pair_key(&self) -> (String, String, Direction, Target, usize, usize) {
        (
            self.study.clone(),
            self.model.clone(),
            self.direction,
            self.target,
            self.repeat,
            self.fold,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub key: ConfigKey,
    pub runs: usize,
    pub mean_test_mse: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_test_mse: f64,
    pub mean_train_mse: f64,
    pub mean_baseline_mse: f64,
    /// From the mean test MSEs of this and the paired baseline configuration.
    pub reduction_percent: Option<f64>,
    /// Runs in which the supplemented model beat its paired baseline.
    pub improved_runs: Option<usize>,
    pub below_threshold: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        let mut r = Self { rows };
        r.finalize();
        r
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = ReportRow>) {
        self.rows.extend(rows);
        self.finalize();
    }

    /// Sorts canonically and fills per-row reductions.
    pub fn finalize(&mut self) {
        self.rows.sort_by_key(|a| a.sort_key());
        let base: BTreeMap<_, f64> = self
            .rows
            .iter()
            .filter(|r| r.supplement_band == SupplementBand::None)
            .map(|r| (r.pair_key(), r.test_mse))
            .collect();
        for r in &mut self.rows {
            r.reduction_percent = match r.supplement_band {
                SupplementBand::None => None,
                _ => base
                    .get(&r.pair_key())
                    .map(|b| 100.0 * (1.0 - r.test_mse / b)),
            };
        }
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<ConfigKey, Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.key()).or_default().push(r);
        }
        let mean_of = |rows: &[&ReportRow], f: fn(&ReportRow) -> f64| {
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        };
        let mut out: Vec<Aggregate> = groups
            .iter()
            .map(|(key, rows)| {
                let tests: Vec<f64> = rows.iter().map(|r| r.test_mse).collect();
                let (mean, std) = mean_std(&tests);
                Aggregate {
                    key: key.clone(),
                    runs: rows.len(),
                    mean_test_mse: mean,
                    std_test_mse: std,
                    mean_train_mse: mean_of(rows, |r| r.train_mse),
                    mean_baseline_mse: mean_of(rows, |r| r.baseline_mse),
                    reduction_percent: None,
                    improved_runs: None,
                    below_threshold: None,
                }
            })
            .collect();
        let means: BTreeMap<ConfigKey, f64> = out
            .iter()
            .map(|a| (a.key.clone(), a.mean_test_mse))
            .collect();
        for a in &mut out {
            if a.key.supplement_band == SupplementBand::None {
                continue;
            }
            let base_key = ConfigKey {
                supplement_band: SupplementBand::None,
                ..a.key.clone()
            };
            if let Some(base) = means.get(&base_key) {
                let ratio = a.mean_test_mse / base;
                a.reduction_percent = Some(100.0 * (1.0 - ratio));
                a.below_threshold = Some(ratio < THRESHOLD_RATIO);
                a.improved_runs = Some(
                    groups[&a.key]
                        .iter()
                        .filter(|r| r.reduction_percent.is_some_and(|p| p > 0.0))
                        .count(),
                );
            }
        }
        out
    }

    /// Row CSV. Wall time is left out so reruns are byte-identical.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "study",
            "model",
            "direction",
            "target_channel",
            "target_band",
            "supplement_band",
            "repeat",
            "fold",
            "n_train",
            "n_test",
            "initial_train_mse",
            "train_mse",
            "test_mse",
            "baseline_mse",
            "pixel_accuracy",
            "reduction_percent",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.study.clone(),
                r.model.clone(),
                r.direction.to_string(),
                r.target.channel.to_string(),
                r.target.band.to_string(),
                r.supplement_band.to_string(),
                r.repeat.to_string(),
                r.fold.to_string(),
                r.train_indices.len().to_string(),
                r.test_indices.len().to_string(),
                r.initial_train_mse.to_string(),
                r.train_mse.to_string(),
                r.test_mse.to_string(),
                r.baseline_mse.to_string(),
                opt(r.pixel_accuracy),
                opt(r.reduction_percent),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_aggregates_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "study",
            "model",
            "direction",
            "target_channel",
            "target_band",
            "supplement_band",
            "runs",
            "mean_test_mse",
            "std_test_mse",
            "mean_train_mse",
            "mean_baseline_mse",
            "reduction_percent",
            "improved_runs",
            "below_threshold",
        ])?;
        for a in self.aggregates() {
            w.write_record([
                a.key.study.clone(),
                a.key.model.clone(),
                a.key.direction.to_string(),
                a.key.target.channel.to_string(),
                a.key.target.band.to_string(),
                a.key.supplement_band.to_string(),
                a.runs.to_string(),
                a.mean_test_mse.to_string(),
                a.std_test_mse.to_string(),
                a.mean_train_mse.to_string(),
                a.mean_baseline_mse.to_string(),
                opt(a.reduction_percent),
                a.improved_runs.map(|n| n.to_string()).unwrap_or_default(),
                a.below_threshold.map(|b| b.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-row wall-clock seconds, kept apart from the reproducible CSVs.
    pub fn write_timings_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "study",
            "model",
            "target",
            "supplement_band",
            "repeat",
            "fold",
            "wall_seconds",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.study.clone(),
                r.model.clone(),
                r.target.to_string(),
                r.supplement_band.to_string(),
                r.repeat.to_string(),
                r.fold.to_string(),
                format!("{:.3}", r.wall_seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
