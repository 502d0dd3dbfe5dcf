use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metascreen::models::{channel_values, Batch, SpectralBatch};
use metascreen::pipeline::{
    generate_dataset_with, kfold, pattern_batch, run_asymmetry_experiment, run_augmentation_study,
    run_inverse_study, train_eval_models, RunLabel, StudyOutput,
};
use metascreen::surrogate::{band_slice, simulate};
use metascreen::{Band, Dataset, Direction, ExperimentReport, Model, PixelGrid, Target};

use crate::config::RunConfig;
use crate::output::{print_sums, sha256_file, write_atomic, Staging};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    Augmentation,
    Asymmetry,
    Inverse,
}

impl Study {
    fn name(self) -> &'static str {
        match self {
            Study::Augmentation => "augmentation",
            Study::Asymmetry => "asymmetry",
            Study::Inverse => "inverse",
        }
    }
}

fn snapshot_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("config.toml")
}

pub fn gen(cfg: &RunConfig, force: bool) -> Result<()> {
    let path = &cfg.paths.dataset;
    crate::output::refuse_existing(path, force)?;
    let d = &cfg.dataset;
    let ds = generate_dataset_with(
        d.samples,
        d.seed,
        (d.fill_min, d.fill_max),
        &cfg.grid,
        &cfg.oracle,
    )?;
    let snapshot = cfg.snapshot()?;
    write_atomic(path, force, |w| Ok(ds.write(w)?))?;
    write_atomic(&snapshot_path(path), force, |w| {
        Ok(w.write_all(snapshot.as_bytes())?)
    })?;
    println!("samples {}", ds.len());
    print_sums(&[(path.clone(), sha256_file(path)?)]);
    Ok(())
}

/// Loads the configured dataset and checks it was generated under this config.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = &cfg.paths.dataset;
    if !path.exists() {
        bail!(
            "dataset {} not found; run `metascreen gen` first",
            path.display()
        );
    }
    let ds = Dataset::load(path).with_context(|| format!("loading {}", path.display()))?;
    let d = &cfg.dataset;
    let mut diffs = Vec::new();
    if ds.len() != d.samples {
        diffs.push(format!("samples {} vs {}", ds.len(), d.samples));
    }
    if ds.generation_seed != d.seed {
        diffs.push(format!("seed {} vs {}", ds.generation_seed, d.seed));
    }
    if ds.fill_range != (d.fill_min, d.fill_max) {
        diffs.push("fill range".into());
    }
    if ds.freq != cfg.grid {
        diffs.push("frequency grid".into());
    }
    if ds.oracle != cfg.oracle {
        diffs.push("oracle constants".into());
    }
    if !diffs.is_empty() {
        bail!(
            "dataset {} was generated with a different configuration ({}); regenerate it with `gen --force`",
            path.display(),
            diffs.join(", ")
        );
    }
    Ok(ds)
}

fn stage_report(stage: &mut Staging, report: &ExperimentReport) -> Result<()> {
    stage.file("report.csv", |w| Ok(report.write_csv(w)?))?;
    stage.file("aggregates.csv", |w| Ok(report.write_aggregates_csv(w)?))?;
    stage.file("timings.csv", |w| Ok(report.write_timings_csv(w)?))?;
    Ok(())
}

fn print_aggregates(report: &ExperimentReport) {
    for a in report.aggregates() {
        let k = &a.key;
        let mut line = format!(
            "{} {} {} supplement={} test_mse={:.6}±{:.6}",
            k.model, k.direction, k.target, k.supplement_band, a.mean_test_mse, a.std_test_mse
        );
        if let Some(r) = a.reduction_percent {
            line += &format!(" reduction={r:.1}%");
        }
        if let Some(n) = a.improved_runs {
            line += &format!(" improved_folds={n}");
        }
        println!("{line}");
    }
}

pub fn train(cfg: &RunConfig, force: bool) -> Result<()> {
    let target = cfg.out().join("train");
    let mut stage = Staging::new(&target, force)?;
    let ds = load_dataset(cfg)?;
    let split = kfold(ds.len(), cfg.experiment.folds, cfg.experiment.split_seed)?;
    let results = train_eval_models(&ds, &cfg.model, &cfg.train, &split, &RunLabel::default())?;
    let snapshot = cfg.snapshot()?;
    stage.file("config.toml", |w| Ok(w.write_all(snapshot.as_bytes())?))?;
    let mut rows = Vec::new();
    for r in results {
        let name = format!("checkpoints/fold{}.ckpt", r.row.fold);
        stage.file(&name, |w| Ok(r.model.save(w)?))?;
        rows.push(r.row);
    }
    let mut report = ExperimentReport::new(rows);
    report.finalize();
    stage_report(&mut stage, &report)?;
    print_aggregates(&report);
    print_sums(&stage.commit()?);
    Ok(())
}

pub fn experiment(cfg: &RunConfig, study: Study, force: bool) -> Result<()> {
    let target = cfg.out().join(format!("experiment-{}", study.name()));
    let mut stage = Staging::new(&target, force)?;
    let ds = load_dataset(cfg)?;
    let settings = cfg.study_settings();
    let e = &cfg.experiment;
    let out: StudyOutput = match study {
        Study::Augmentation => {
            let targets: Vec<Target> = e
                .bands
                .iter()
                .flat_map(|&band| {
                    e.channels
                        .iter()
                        .map(move |&channel| Target { channel, band })
                })
                .collect();
            run_augmentation_study(&ds, &e.families, &targets, &settings)?
        }
        Study::Asymmetry => run_asymmetry_experiment(
            &ds,
            e.asymmetry_family,
            e.asymmetry_channel,
            &settings,
            e.repeats,
        )?,
        Study::Inverse => run_inverse_study(&ds, &e.families, &e.bands, &settings)?,
    };
    let snapshot = cfg.snapshot()?;
    stage.file("config.toml", |w| Ok(w.write_all(snapshot.as_bytes())?))?;
    stage_report(&mut stage, &out.report)?;
    for plot in &out.plots {
        stage.file(&format!("plots/{}.csv", plot.name), |w| {
            Ok(plot.write_csv(w)?)
        })?;
    }
    if let Some(a) = &out.asymmetry {
        stage.file("asymmetry.csv", |w| Ok(a.write_csv(w)?))?;
        for (name, s) in [("damped", &a.damped), ("undamped", &a.undamped)] {
            println!(
                "{name}: mse_low_to_high={:.6} mse_high_to_low={:.6} ratio={:.3}±{:.3}",
                s.mse_low_to_high, s.mse_high_to_low, s.ratio_mean, s.ratio_std
            );
        }
    }
    print_aggregates(&out.report);
    print_sums(&stage.commit()?);
    Ok(())
}

pub fn export(
    cfg: &RunConfig,
    checkpoint: &Path,
    pattern: &Path,
    output: Option<&Path>,
    force: bool,
) -> Result<()> {
    let model = Model::load_path(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let text = std::fs::read_to_string(pattern)
        .with_context(|| format!("reading {}", pattern.display()))?;
    let grid = PixelGrid::parse_text(&text)
        .with_context(|| format!("pattern file {}", pattern.display()))?;
    let mc = model.config();
    let response = simulate(&grid, &cfg.grid, &cfg.oracle)?;
    let band = mc.target.band;
    let range = cfg.grid.band_range(band)?;
    if range.len() != mc.band_samples {
        bail!(
            "checkpoint expects {} samples per band, the configured grid gives {}",
            mc.band_samples,
            range.len()
        );
    }
    let batch = match mc.direction {
        Direction::Forward => {
            let supp = match mc.supplement_band.band() {
                Some(b) => Some(band_slice(&response, &cfg.grid, b)?),
                None => None,
            };
            pattern_batch(mc, &grid, supp.as_ref())?
        }
        Direction::Spectral => {
            let input = band_slice(&response, &cfg.grid, band.opposite())?;
            Batch::Spectral(SpectralBatch::new(&[&input])?)
        }
        Direction::Inverse => {
            bail!("export predicts spectra; this checkpoint is an inverse-design model")
        }
    };
    let predicted = model.predict(&batch)?;
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out().join("export.csv"));
    let column = format!("predicted_{}", mc.target.channel);
    write_atomic(&path, force, |w| {
        writeln!(w, "f_thz,band,{column},amp_x,amp_y,phase")?;
        for i in 0..cfg.grid.count {
            let f = cfg.grid.point(i);
            let b = if cfg.grid.band_range(Band::Low)?.contains(&i) {
                Band::Low
            } else {
                Band::High
            };
            let p = if range.contains(&i) {
                predicted.data()[i - range.start].to_string()
            } else {
                String::new()
            };
            writeln!(
                w,
                "{f},{b},{p},{},{},{}",
                response.amp_x[i], response.amp_y[i], response.phase[i]
            )?;
        }
        Ok(())
    })?;
    let truth =
        channel_values(&band_slice(&response, &cfg.grid, band)?, mc.target.channel).to_vec();
    let mse = truth
        .iter()
        .zip(predicted.data())
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / truth.len() as f64;
    println!("{} {} mse={mse:.6}", mc.family, mc.target);
    print_sums(&[(path.clone(), sha256_file(&path)?)]);
    Ok(())
}
