use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qsegment::data::AugmentConfig;
use qsegment::metrics::DEFAULT_THRESHOLD;
use qsegment::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Common;

/// Settings readable from a TOML file. Every field is optional; flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    synthetic: Option<bool>,
    seed: Option<u64>,
    size: Option<String>,
    threshold: Option<f32>,
    quantized: Option<bool>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    restart_period: Option<usize>,
    eta_min: Option<f64>,
    lambda: Option<f32>,
    val_every: Option<usize>,
    augment: Option<bool>,
}

/// Fully resolved run settings.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub synthetic: bool,
    pub seed: u64,
    #[serde(serialize_with = "size_str")]
    pub size: (usize, usize),
    pub threshold: f32,
    pub quantized: bool,
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub restart_period: usize,
    pub eta_min: f64,
    pub lambda: f32,
    pub val_every: usize,
    pub augment: bool,
}

fn size_str<S: serde::Serializer>(v: &(usize, usize), s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}x{}", v.0, v.1))
}

impl RunConfig {
    pub fn resolve(flags: &Common) -> Result<Self> {
        let file = match &flags.config {
            Some(p) => read_file(p)?,
            None => FileConfig::default(),
        };
        let d = TrainConfig::default();
        let size = match (&flags.size, &file.size) {
            (Some(s), _) => *s,
            (None, Some(s)) => crate::parse_size(s).map_err(anyhow::Error::msg)?,
            (None, None) => (64, 64),
        };
        if size.0 == 0 || size.1 == 0 || size.0 % 8 != 0 || size.1 % 8 != 0 {
            bail!(qsegment::Error::InvalidArgument(format!("size {}x{} must be positive multiples of 8", size.0, size.1)));
        }
        let threshold = flags.threshold.or(file.threshold).unwrap_or(DEFAULT_THRESHOLD);
        if !(0.0..=1.0).contains(&threshold) {
            bail!(qsegment::Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
        }
        Ok(RunConfig {
            model: flags.model.clone().or(file.model),
            out: flags.out.clone().or(file.out),
            data: flags.data.clone().or(file.data),
            synthetic: flags.synthetic || file.synthetic.unwrap_or(false),
            seed: flags.seed.or(file.seed).unwrap_or(d.seed),
            size,
            threshold,
            quantized: flags.quantized || file.quantized.unwrap_or(false),
            steps: flags.steps.or(file.steps).or(d.max_steps),
            batch_size: file.batch_size.unwrap_or(d.batch_size),
            epochs: file.epochs.unwrap_or(d.epochs),
            lr: file.lr.unwrap_or(d.lr0),
            restart_period: file.restart_period.unwrap_or(d.restart_period),
            eta_min: file.eta_min.unwrap_or(d.eta_min),
            lambda: file.lambda.unwrap_or(d.lambda),
            val_every: file.val_every.unwrap_or(d.val_every),
            augment: file.augment.unwrap_or(true),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr0: self.lr,
            restart_period: self.restart_period,
            eta_min: self.eta_min,
            seed: self.seed,
            lambda: self.lambda,
            augment: if self.augment { AugmentConfig::default() } else { AugmentConfig::none() },
            max_steps: self.steps,
            val_every: self.val_every,
        }
    }

    /// The resolved configuration as logged at the top of a run.
    pub fn canonical(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain struct serializes")
    }
}

fn read_file(p: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}
