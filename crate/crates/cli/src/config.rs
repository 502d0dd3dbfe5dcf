use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metascreen::pipeline::{StudySettings, DEFAULT_FOLDS};
use metascreen::{Band, Channel, Family, FrequencyGrid, ModelConfig, OracleConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::Value;

pub const DEFAULT_OUT: &str = "metascreen-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub grid: FrequencyGrid,
    pub oracle: OracleConfig,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Output root; falls back to `METASCREEN_OUT`, then `metascreen-out`.
    pub out: Option<PathBuf>,
    /// Dataset file, relative to `out` unless absolute.
    pub dataset: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: None,
            dataset: PathBuf::from("dataset.msds"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub samples: usize,
    pub seed: u64,
    pub fill_min: f64,
    pub fill_max: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            samples: 512,
            seed: 1,
            fill_min: 0.2,
            fill_max: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub families: Vec<Family>,
    /// Channels of the augmentation study.
    pub channels: Vec<Channel>,
    /// Target bands of the augmentation and inverse studies.
    pub bands: Vec<Band>,
    pub folds: usize,
    pub split_seed: u64,
    pub repeats: usize,
    pub asymmetry_family: Family,
    pub asymmetry_channel: Channel,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            channels: Channel::ALL.to_vec(),
            bands: Band::ALL.to_vec(),
            folds: DEFAULT_FOLDS,
            split_seed: 0,
            repeats: 5,
            asymmetry_family: Family::Cnn,
            asymmetry_channel: Channel::AmpX,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides and resolves paths.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
        out_flag: Option<PathBuf>,
        out_env: Option<PathBuf>,
    ) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let explicit_mode = root
            .get("model")
            .and_then(Value::as_table)
            .is_some_and(|m| m.contains_key("input_mode"));
        let mut cfg: RunConfig = Value::Table(root)
            .try_into()
            .context("invalid configuration")?;
        if !explicit_mode {
            cfg.model.input_mode = cfg.model.family.default_input_mode();
        }
        let out = out_flag
            .or_else(|| cfg.paths.out.clone())
            .or(out_env)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        cfg.paths.out = Some(absolute(&out)?);
        if cfg.paths.dataset.is_relative() {
            cfg.paths.dataset = cfg.out().join(&cfg.paths.dataset);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out(&self) -> &Path {
        self.paths.out.as_deref().unwrap_or(Path::new(DEFAULT_OUT))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.oracle.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.dataset;
        if !(0.0..=1.0).contains(&d.fill_min)
            || !(0.0..=1.0).contains(&d.fill_max)
            || d.fill_min > d.fill_max
        {
            bail!(
                "dataset fill range [{}, {}] must lie in [0, 1]",
                d.fill_min,
                d.fill_max
            );
        }
        Ok(())
    }

    pub fn study_settings(&self) -> StudySettings {
        StudySettings {
            template: self.model.clone(),
            train: self.train.clone(),
            folds: self.experiment.folds,
            split_seed: self.experiment.split_seed,
        }
    }

    /// The fully resolved configuration as TOML.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string(self).context("serializing config snapshot")
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

/// `section.key=value`; the value is read as TOML and otherwise kept as a string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let (last, path) = parts.split_last().expect("nonempty");
    let mut table = root;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {p} is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
