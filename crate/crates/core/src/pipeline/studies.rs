use std::io::Write;

use crate::error::{Error, Result};
use crate::models::{
    Channel, Direction, Family, ModelConfig, SupplementBand, Target, CHANCE_PIXEL_MSE,
};
use crate::surrogate::Band;

use super::dataset::Dataset;
use super::folds::{kfold, FoldSplit, DEFAULT_FOLDS};
use super::report::{mean_std, ExperimentReport, ReportRow};
use super::train::{
    evaluate_prepared, train_eval_models, FoldResult, Prepared, RunLabel, TrainConfig,
};

/// Knobs shared by every configuration in a study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudySettings {
    /// Hyperparameters and seed; family, direction, target and supplement are
    /// overwritten per configuration.
    pub template: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub split_seed: u64,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            template: ModelConfig::default(),
            train: TrainConfig::default(),
            folds: DEFAULT_FOLDS,
            split_seed: 0,
        }
    }
}

impl StudySettings {
    fn split(&self, ds: &Dataset) -> Result<FoldSplit> {
        kfold(ds.len(), self.folds, self.split_seed)
    }

    fn config(
        &self,
        family: Family,
        direction: Direction,
        target: Target,
        supplement: SupplementBand,
    ) -> ModelConfig {
        ModelConfig {
            family,
            direction,
            input_mode: family.default_input_mode(),
            target,
            supplement_band: supplement,
            ..self.template.clone()
        }
    }
}

/// One predicted-vs-true spectrum for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub name: String,
    pub rows: Vec<PlotRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotRow {
    pub f_thz: f64,
    pub truth: f64,
    /// Empty for supplementary-band rows, which are model input.
    pub prediction: Option<f64>,
    pub band_role: &'static str,
}

impl PlotSeries {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["f_thz", "truth", "prediction", "band_role"])?;
        for r in &self.rows {
            w.write_record([
                r.f_thz.to_string(),
                r.truth.to_string(),
                r.prediction.map(|p| p.to_string()).unwrap_or_default(),
                r.band_role.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatStat {
    pub repeat: usize,
    pub mse_low_to_high: f64,
    pub mse_high_to_low: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymmetryStats {
    pub per_repeat: Vec<RepeatStat>,
    /// Mean over repeats of the fold-mean test MSE.
    pub mse_low_to_high: f64,
    pub mse_high_to_low: f64,
    /// `mse_high_to_low / mse_low_to_high` of the means above.
    pub ratio: f64,
    /// Mean and sample deviation of the per-repeat ratios.
    pub ratio_mean: f64,
    pub ratio_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymmetrySummary {
    pub damped: AsymmetryStats,
    pub undamped: AsymmetryStats,
}

impl AsymmetrySummary {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "oracle",
            "repeat",
            "mse_low_to_high",
            "mse_high_to_low",
            "ratio",
        ])?;
        for (name, s) in [("damped", &self.damped), ("undamped", &self.undamped)] {
            for r in &s.per_repeat {
                w.write_record([
                    name.to_string(),
                    r.repeat.to_string(),
                    r.mse_low_to_high.to_string(),
                    r.mse_high_to_low.to_string(),
                    r.ratio.to_string(),
                ])?;
            }
            w.write_record([
                name.to_string(),
                "mean".to_string(),
                s.mse_low_to_high.to_string(),
                s.mse_high_to_low.to_string(),
                s.ratio_mean.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StudyOutput {
    pub report: ExperimentReport,
    pub plots: Vec<PlotSeries>,
    pub asymmetry: Option<AsymmetrySummary>,
}

/// Every channel × band combination.
pub fn all_targets() -> Vec<Target> {
    Band::ALL
        .iter()
        .flat_map(|&band| {
            Channel::ALL
                .iter()
                .map(move |&channel| Target { channel, band })
        })
        .collect()
}

/// Truth and prediction on the first held-out sample of fold 0.
fn plot_first_test(ds: &Dataset, fold0: &FoldResult, name: String) -> Result<PlotSeries> {
    let cfg = fold0.model.config();
    let prep = Prepared::new(ds, cfg)?;
    let sample = fold0.row.test_indices[0];
    let pred = fold0.model.predict(&prep.batch(&[sample])?)?;
    let mut rows = Vec::new();
    let mut push_band = |band: Band, role: &'static str, pred: Option<&[f64]>| -> Result<()> {
        let range = ds.freq.band_range(band)?;
        let truth = ds.band(sample, band);
        let values = crate::models::channel_values(&truth, cfg.target.channel);
        for (k, i) in range.enumerate() {
            rows.push(PlotRow {
                f_thz: ds.freq.point(i),
                truth: values[k],
                prediction: pred.map(|p| p[k]),
                band_role: role,
            });
        }
        Ok(())
    };
    let context = match cfg.direction {
        Direction::Spectral => Some(cfg.target.band.opposite()),
        _ => cfg.supplement_band.band(),
    };
    if let Some(b) = context {
        push_band(b, "supplement", None)?;
    }
    push_band(cfg.target.band, "target", Some(pred.data()))?;
    rows.sort_by(|a, b| a.f_thz.total_cmp(&b.f_thz));
    Ok(PlotSeries { name, rows })
}

fn check_families(families: &[Family]) -> Result<()> {
    if families.is_empty() {
        return Err(Error::config("study needs at least one model family"));
    }
    Ok(())
}

/// Baseline vs supplemented forward models on identical folds, seeds and batch orders.
pub fn run_augmentation_study(
    ds: &Dataset,
    families: &[Family],
    targets: &[Target],
    s: &StudySettings,
) -> Result<StudyOutput> {
    check_families(families)?;
    let split = s.split(ds)?;
    let label = RunLabel {
        study: "augmentation".into(),
        repeat: 0,
    };
    let mut rows = Vec::new();
    let mut plots = Vec::new();
    for &family in families {
        for &target in targets {
            for supp in [
                SupplementBand::None,
                SupplementBand::from_band(target.band.opposite()),
            ] {
                let cfg = s.config(family, Direction::Forward, target, supp);
                let results = train_eval_models(ds, &cfg, &s.train, &split, &label)?;
                if supp != SupplementBand::None {
                    plots.push(plot_first_test(
                        ds,
                        &results[0],
                        format!("augmentation_{family}_{}_{}", target.channel, target.band),
                    )?);
                }
                rows.extend(results.into_iter().map(|r| r.row));
            }
        }
    }
    Ok(StudyOutput {
        report: ExperimentReport::new(rows),
        plots,
        asymmetry: None,
    })
}

fn asymmetry_arm(
    ds: &Dataset,
    family: Family,
    channel: Channel,
    s: &StudySettings,
    repeats: usize,
    study: &str,
    rows: &mut Vec<ReportRow>,
    plots: &mut Vec<PlotSeries>,
) -> Result<AsymmetryStats> {
    let split = s.split(ds)?;
    let mut per_repeat = Vec::with_capacity(repeats);
    for repeat in 0..repeats {
        let mut settings = s.clone();
        settings.template.seed = s.template.seed.wrapping_add(repeat as u64);
        settings.train.shuffle_seed = s.train.shuffle_seed.wrapping_add(repeat as u64);
        let label = RunLabel {
            study: study.into(),
            repeat,
        };
        let mut means = [0.0; 2];
        for (slot, predicted) in [Band::High, Band::Low].into_iter().enumerate() {
            let cfg = settings.config(
                family,
                Direction::Spectral,
                Target {
                    channel,
                    band: predicted,
                },
                SupplementBand::None,
            );
            let results = train_eval_models(ds, &cfg, &settings.train, &split, &label)?;
            if repeat == 0 {
                plots.push(plot_first_test(
                    ds,
                    &results[0],
                    format!("{study}_{family}_to_{predicted}"),
                )?);
            }
            means[slot] =
                results.iter().map(|r| r.row.test_mse).sum::<f64>() / results.len() as f64;
            rows.extend(results.into_iter().map(|r| r.row));
        }
        per_repeat.push(RepeatStat {
            repeat,
            mse_low_to_high: means[0],
            mse_high_to_low: means[1],
            ratio: means[1] / means[0],
        });
    }
    let lh = per_repeat.iter().map(|r| r.mse_low_to_high).sum::<f64>() / repeats as f64;
    let hl = per_repeat.iter().map(|r| r.mse_high_to_low).sum::<f64>() / repeats as f64;
    let ratios: Vec<f64> = per_repeat.iter().map(|r| r.ratio).collect();
    let (ratio_mean, ratio_std) = mean_std(&ratios);
    Ok(AsymmetryStats {
        per_repeat,
        mse_low_to_high: lh,
        mse_high_to_low: hl,
        ratio: hl / lh,
        ratio_mean,
        ratio_std,
    })
}

/// Band-to-band prediction in both directions, once on the dataset as stored
/// and once on the same screens re-simulated without damping or noise.
pub fn run_asymmetry_experiment(
    ds: &Dataset,
    family: Family,
    channel: Channel,
    s: &StudySettings,
    repeats: usize,
) -> Result<StudyOutput> {
    if repeats < 3 {
        return Err(Error::domain(format!(
            "asymmetry experiment needs at least 3 repeats, got {repeats}"
        )));
    }
    let undamped_ds = ds.resimulate(&ds.oracle.undamped())?;
    let mut rows = Vec::new();
    let mut plots = Vec::new();
    let damped = asymmetry_arm(
        ds,
        family,
        channel,
        s,
        repeats,
        "asymmetry_damped",
        &mut rows,
        &mut plots,
    )?;
    let undamped = asymmetry_arm(
        &undamped_ds,
        family,
        channel,
        s,
        repeats,
        "asymmetry_undamped",
        &mut rows,
        &mut plots,
    )?;
    Ok(StudyOutput {
        report: ExperimentReport::new(rows),
        plots,
        asymmetry: Some(AsymmetrySummary { damped, undamped }),
    })
}

/// Inverse models per family and input band, plus the constant-0.5 reference rows.
pub fn run_inverse_study(
    ds: &Dataset,
    families: &[Family],
    bands: &[Band],
    s: &StudySettings,
) -> Result<StudyOutput> {
    check_families(families)?;
    let split = s.split(ds)?;
    let label = RunLabel {
        study: "inverse".into(),
        repeat: 0,
    };
    let mut rows = Vec::new();
    for &band in bands {
        let target = Target {
            channel: Channel::AmpX,
            band,
        };
        for &family in families {
            let cfg = s.config(family, Direction::Inverse, target, SupplementBand::None);
            rows.extend(
                train_eval_models(ds, &cfg, &s.train, &split, &label)?
                    .into_iter()
                    .map(|r| r.row),
            );
        }
        let cfg = s.config(
            families[0],
            Direction::Inverse,
            target,
            SupplementBand::None,
        );
        rows.extend(constant_half_rows(ds, &cfg, &split)?);
    }
    Ok(StudyOutput {
        report: ExperimentReport::new(rows),
        plots: Vec::new(),
        asymmetry: None,
    })
}

/// Rows for the predictor that outputs 0.5 for every pixel.
fn constant_half_rows(
    ds: &Dataset,
    cfg: &ModelConfig,
    split: &FoldSplit,
) -> Result<Vec<ReportRow>> {
    let mut zero = crate::models::build_model(cfg)?;
    for t in zero.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let prep = Prepared::new(ds, cfg)?;
    (0..split.k)
        .map(|fold| {
            let (train_indices, test_indices) = (split.train(fold), split.test(fold));
            // sigmoid(0) = 0.5 everywhere
            let (train_mse, _) = evaluate_prepared(&zero, &prep, &train_indices)?;
            let (test_mse, pixel_accuracy) = evaluate_prepared(&zero, &prep, &test_indices)?;
            debug_assert!((test_mse - CHANCE_PIXEL_MSE).abs() < 1e-12);
            let mut mean = vec![0.0; crate::screen::CELLS];
            for &i in &train_indices {
                for (m, p) in mean.iter_mut().zip(ds.grids[i].to_f64()) {
                    *m += p / train_indices.len() as f64;
                }
            }
            let mut baseline = 0.0;
            for &i in &test_indices {
                for (m, p) in mean.iter().zip(ds.grids[i].to_f64()) {
                    baseline += (m - p) * (m - p);
                }
            }
            Ok(ReportRow {
                study: "inverse".into(),
                model: "constant_half".into(),
                direction: Direction::Inverse,
                target: cfg.target,
                supplement_band: SupplementBand::None,
                repeat: 0,
                fold,
                train_mse,
                test_mse,
                initial_train_mse: train_mse,
                baseline_mse: baseline / (test_indices.len() * crate::screen::CELLS) as f64,
                pixel_accuracy,
                reduction_percent: None,
                train_indices,
                test_indices,
                wall_seconds: 0.0,
            })
        })
        .collect()
}
