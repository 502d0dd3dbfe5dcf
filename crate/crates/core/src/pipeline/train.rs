use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{AdamConfig, Tensor};
use crate::error::{Error, Result};
use crate::models::{
    build_model, channel_values, encode_target, spectrum_features, Batch, Channel, Direction,
    ForwardBatch, InputMode, InverseBatch, Model, ModelConfig, SpectralBatch, SPECTRUM_FEATURES,
};
use crate::screen::{PixelGrid, CELLS, SIDE};

use super::dataset::Dataset;
use super::folds::FoldSplit;
use super::report::ReportRow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-fold mini-batch order.
    pub shuffle_seed: u64,
    /// Folds trained concurrently; each fold stays single-threaded.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig::default(),
            shuffle_seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::config(
                "epochs, batch_size and workers must be positive",
            ));
        }
        self.adam.validate()
    }
}

/// Per-sample model inputs and targets, flattened once per run.
pub(crate) struct Prepared {
    direction: Direction,
    input_mode: InputMode,
    channel: Channel,
    band_samples: usize,
    main: Vec<Vec<f64>>,
    supplement: Option<Vec<Vec<f64>>>,
    /// Targets in the network's output space.
    train_target: Vec<Vec<f64>>,
    /// Targets in reporting units.
    report_target: Vec<Vec<f64>>,
}

impl Prepared {
    pub fn new(ds: &Dataset, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        for band in [cfg.target.band, cfg.target.band.opposite()] {
            let have = ds.band_len(band)?;
            if have != cfg.band_samples {
                return Err(Error::domain(format!(
                    "model expects {} samples per band but the dataset's {band} band has {have}",
                    cfg.band_samples
                )));
            }
        }
        let n = ds.len();
        let main = (0..n)
            .map(|i| match cfg.direction {
                Direction::Forward => match cfg.input_mode {
                    InputMode::Image => ds.grids[i].to_f64(),
                    InputMode::Tokens => ds.grids[i].to_tokens().to_bit_vectors(),
                },
                _ => spectrum_features(&ds.band(i, cfg.input_band().expect("spectrum input"))),
            })
            .collect();
        let supplement = cfg
            .supplement_band
            .band()
            .map(|b| (0..n).map(|i| spectrum_features(&ds.band(i, b))).collect());
        let (train_target, report_target) = (0..n)
            .map(|i| match cfg.direction {
                Direction::Inverse => {
                    let px = ds.grids[i].to_f64();
                    (px.clone(), px)
                }
                _ => {
                    let r = ds.band(i, cfg.target.band);
                    (
                        encode_target(&r, cfg.target.channel),
                        channel_values(&r, cfg.target.channel).to_vec(),
                    )
                }
            })
            .unzip();
        Ok(Self {
            direction: cfg.direction,
            input_mode: cfg.input_mode,
            channel: cfg.target.channel,
            band_samples: cfg.band_samples,
            main,
            supplement,
            train_target,
            report_target,
        })
    }

    fn gather(rows: &[Vec<f64>], idx: &[usize], shape: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * rows[idx[0]].len());
        for &i in idx {
            data.extend_from_slice(&rows[i]);
        }
        let mut full = vec![idx.len()];
        full.extend_from_slice(shape);
        Tensor::new(full, data)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let dims = [self.band_samples, SPECTRUM_FEATURES];
        Ok(match self.direction {
            Direction::Forward => {
                let shape: &[usize] = match self.input_mode {
                    InputMode::Image => &[1, SIDE, SIDE],
                    InputMode::Tokens => &[SIDE, SIDE],
                };
                Batch::Forward(ForwardBatch {
                    pattern: Self::gather(&self.main, idx, shape)?,
                    supplement: self
                        .supplement
                        .as_ref()
                        .map(|s| Self::gather(s, idx, &dims))
                        .transpose()?,
                })
            }
            Direction::Inverse => Batch::Inverse(InverseBatch {
                spectrum: Self::gather(&self.main, idx, &dims)?,
            }),
            Direction::Spectral => Batch::Spectral(SpectralBatch {
                spectrum: Self::gather(&self.main, idx, &dims)?,
            }),
        })
    }

    fn target(&self, idx: &[usize]) -> Result<Tensor> {
        let w = self.train_target[idx[0]].len();
        Self::gather(&self.train_target, idx, &[w])
    }

    /// Element-wise mean of the training targets, in output space.
    fn mean_train_target(&self, idx: &[usize]) -> Vec<f64> {
        let mut mean = vec![0.0; self.train_target[idx[0]].len()];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(&self.train_target[i]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= idx.len() as f64);
        mean
    }

    /// Mean predictor in reporting units (circular mean for phase).
    fn mean_predictor(&self, idx: &[usize]) -> Vec<f64> {
        let mean = self.mean_train_target(idx);
        match (self.direction, self.channel) {
            (Direction::Inverse, _) => mean,
            (_, Channel::Phase) => crate::models::decode_output(&mean, Channel::Phase),
            _ => mean,
        }
    }

    fn mse_against(&self, idx: &[usize], pred: impl Fn(usize) -> Vec<f64>) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (k, &i) in idx.iter().enumerate() {
            let p = pred(k);
            for (a, b) in p.iter().zip(&self.report_target[i]) {
                total += (a - b) * (a - b);
            }
            count += p.len();
        }
        total / count as f64
    }
}

const EVAL_CHUNK: usize = 64;

/// Reporting-unit MSE of `model` over `idx` and, for inverse models, the
/// thresholded pixel accuracy.
pub(crate) fn evaluate_prepared(
    model: &Model,
    prep: &Prepared,
    idx: &[usize],
) -> Result<(f64, Option<f64>)> {
    if idx.is_empty() {
        return Err(Error::domain("evaluation set is empty"));
    }
    let preds: Vec<Vec<f64>> = idx
        .chunks(EVAL_CHUNK)
        .map(|chunk| {
            let out = model.predict(&prep.batch(chunk)?)?;
            let w = out.shape()[1];
            Ok(out
                .data()
                .chunks(w)
                .map(<[f64]>::to_vec)
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mse = prep.mse_against(idx, |k| preds[k].clone());
    let accuracy = (prep.direction == Direction::Inverse).then(|| {
        let mut hits = 0usize;
        for (k, &i) in idx.iter().enumerate() {
            hits += preds[k]
                .iter()
                .zip(&prep.report_target[i])
                .filter(|(p, t)| (**p >= 0.5) == (**t >= 0.5))
                .count();
        }
        hits as f64 / (idx.len() * CELLS) as f64
    });
    Ok((mse, accuracy))
}

/// Reporting-unit test MSE of `model` on the given samples.
pub fn evaluate(model: &Model, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    let prep = Prepared::new(ds, model.config())?;
    evaluate_prepared(model, &prep, idx).map(|(mse, _)| mse)
}

fn fold_stream(shuffle_seed: u64, fold: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(shuffle_seed ^ (fold as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Row labels shared by every fold of one configuration.
#[derive(Clone, Debug)]
pub struct RunLabel {
    pub study: String,
    pub repeat: usize,
}

impl Default for RunLabel {
    fn default() -> Self {
        Self {
            study: "train".into(),
            repeat: 0,
        }
    }
}

pub struct FoldResult {
    pub row: ReportRow,
    pub model: Model,
}

pub(crate) fn train_fold(
    prep: &Prepared,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    split: &FoldSplit,
    fold: usize,
    label: &RunLabel,
) -> Result<FoldResult> {
    let started = Instant::now();
    let train_idx = split.train(fold);
    let test_idx = split.test(fold);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::domain(format!(
            "fold {fold} leaves an empty train or test set"
        )));
    }
    let mut model = build_model(cfg)?;
    model.init_output_bias(&prep.mean_train_target(&train_idx))?;
    let (initial_train_mse, _) = evaluate_prepared(&model, prep, &train_idx)?;

    let mut states = model.optimizer_states();
    let mut rng = fold_stream(tc.shuffle_seed, fold);
    let mut order = train_idx.clone();
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let batch = prep.batch(chunk)?;
            let target = prep.target(chunk)?;
            model.train_step(&batch, &target, &mut states, &tc.adam)?;
        }
    }

    let (train_mse, _) = evaluate_prepared(&model, prep, &train_idx)?;
    let (test_mse, pixel_accuracy) = evaluate_prepared(&model, prep, &test_idx)?;
    let mean = prep.mean_predictor(&train_idx);
    let baseline_mse = prep.mse_against(&test_idx, |_| mean.clone());
    let row = ReportRow {
        study: label.study.clone(),
        model: cfg.family.to_string(),
        direction: cfg.direction,
        target: cfg.target,
        supplement_band: cfg.supplement_band,
        repeat: label.repeat,
        fold,
        train_mse,
        test_mse,
        initial_train_mse,
        baseline_mse,
        pixel_accuracy,
        reduction_percent: None,
        train_indices: train_idx,
        test_indices: test_idx,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(FoldResult { row, model })
}

/// Trains and evaluates one model per fold, returning rows in fold order.
pub fn train_eval(
    ds: &Dataset,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    split: &FoldSplit,
) -> Result<Vec<ReportRow>> {
    Ok(train_eval_models(ds, cfg, tc, split, &RunLabel::default())?
        .into_iter()
        .map(|r| r.row)
        .collect())
}

/// [`train_eval`] that also hands back the trained models.
pub fn train_eval_models(
    ds: &Dataset,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    split: &FoldSplit,
    label: &RunLabel,
) -> Result<Vec<FoldResult>> {
    tc.validate()?;
    if ds.is_empty() {
        return Err(Error::domain("dataset is empty"));
    }
    if split.len() != ds.len() {
        return Err(Error::domain(format!(
            "fold split covers {} samples, dataset has {}",
            split.len(),
            ds.len()
        )));
    }
    let prep = Prepared::new(ds, cfg)?;
    let run = |fold| train_fold(&prep, cfg, tc, split, fold, label);
    if tc.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(tc.workers)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?;
        pool.install(|| (0..split.k).into_par_iter().map(run).collect())
    } else {
        (0..split.k).map(run).collect()
    }
}

/// One-sample forward batch for ad-hoc prediction.
pub fn pattern_batch(
    cfg: &ModelConfig,
    grid: &PixelGrid,
    supplement: Option<&crate::surrogate::SpectralResponse>,
) -> Result<Batch> {
    let supp = supplement.map(|s| vec![s]);
    Ok(Batch::Forward(ForwardBatch::new(
        &[grid],
        cfg.input_mode,
        supp.as_deref(),
    )?))
}
