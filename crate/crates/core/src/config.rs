//! Experiment configuration files.
//!
//! ```toml
//! [experiment]
//! id = "gauss"
//! seed = 0
//!
//! [data]
//! train_per_class = 90
//! val_per_class = 10
//! [data.synthetic]
//! classes = 10
//! per_class = 120
//! side = 36
//!
//! [[grid]]
//! method = "stability"
//! axes = [
//!   { name = "alpha", start = 0.01, end = 10.0, points = 3, scale = "log" },
//!   { name = "gaussian", start = 0.01, end = 1.0, points = 4, scale = "log" },
//! ]
//!
//! [[evaluation.tests]]
//! distortion = "gaussian"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, load_synthetic, split_per_class, Dataset, Pipeline, Split, SyntheticSpec};
use crate::distortions::DistortionSpec;
use crate::error::{Error, Result};
use crate::harness::{Axis, TestSweep};
use crate::nn::ModelConfig;
use crate::optim::DEFAULT_MOMENTUM;
use crate::train::{Method, PreparedSplit, TrainingData};

/// Environment variable naming the output directory when neither the
/// command line nor the configuration does.
pub const OUT_ENV: &str = "STABLETRAIN_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataConfig,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "Schedule::baseline")]
    pub baseline: Schedule,
    #[serde(default = "Schedule::fine_tune")]
    pub fine_tune: Schedule,
    #[serde(default)]
    pub grid: Vec<GridConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

/// Exactly one of `synthetic` and `idx` must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Seed of the per-class split and of the synthetic generator.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxConfig>,
}

/// IDX files; paths are relative to the configuration file. Without test
/// files the samples left after the train/validation split are the test
/// set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

/// Architecture knobs; input extents and class count come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_blocks: Vec<usize>,
    #[serde(default = "yes")]
    pub norm: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(2);
        ModelSection {
            stem_channels: d.stem_channels,
            stem_stride: d.stem_stride,
            stage_blocks: d.stage_blocks,
            norm: d.norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

impl Schedule {
    pub fn baseline() -> Self {
        Schedule {
            epochs: 15,
            batch_size: 32,
            lr: 0.01,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn fine_tune() -> Self {
        Schedule {
            epochs: 5,
            ..Schedule::baseline()
        }
    }
}

/// One method's grid. Axes name either the method hyperparameter (`alpha`,
/// `p`, `mu`) or a distortion kind; distortion axes compose in order,
/// followed by `fixed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub method: Method,
    pub axes: Vec<Axis>,
    #[serde(default = "DistortionSpec::identity")]
    pub fixed: DistortionSpec,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub per_batch_draw: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detach_reference: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Seed of the distorted test sets; the experiment seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tests: Vec<TestSweep>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// Loaded splits ready for training and evaluation.
pub struct ExperimentData {
    pub data: TrainingData,
    pub test: PreparedSplit,
}

impl ExperimentData {
    pub fn channels(&self) -> usize {
        self.data.train.clean[0].channels()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves dataset paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(idx) = cfg.data.idx.as_mut() {
            for p in [Some(&mut idx.images), Some(&mut idx.labels), idx.test_images.as_mut(), idx.test_labels.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.experiment.id.is_empty() {
            return err("experiment.id must not be empty".into());
        }
        if self.experiment.jobs == Some(0) {
            return err("experiment.jobs must be positive".into());
        }
        match (&self.data.synthetic, &self.data.idx) {
            (Some(s), None) => s.validate()?,
            (None, Some(idx)) => {
                if idx.test_images.is_some() != idx.test_labels.is_some() {
                    return err("data.idx.test_images and test_labels go together".into());
                }
            }
            _ => return err("exactly one of [data.synthetic] and [data.idx] is required".into()),
        }
        if self.data.train_per_class == 0 || self.data.val_per_class == 0 {
            return err("train_per_class and val_per_class must be positive".into());
        }
        self.pipeline.validate()?;
        self.model_config(2, 1).validate().map_err(|e| Error::Config(e.to_string()))?;
        for s in [&self.baseline, &self.fine_tune] {
            if s.epochs == 0 || s.batch_size == 0 {
                return err("epochs and batch_size must be positive".into());
            }
        }
        for g in &self.grid {
            if g.method == Method::Baseline {
                return err("the baseline is trained by train-baseline, not by a grid".into());
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.experiment.seed = s;
        }
        if let Some(out) = &o.out {
            self.experiment.out = Some(out.clone());
        }
        if let Some(j) = o.jobs {
            self.experiment.jobs = Some(j);
        }
    }

    /// Output directory: command line, then configuration, then the
    /// environment.
    pub fn out_dir(&self) -> Result<PathBuf> {
        if let Some(out) = &self.experiment.out {
            return Ok(out.clone());
        }
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::Config(format!(
                "no output directory: pass --out, set experiment.out or {OUT_ENV}"
            ))),
        }
    }

    pub fn jobs(&self) -> usize {
        self.experiment
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn evaluation_seed(&self) -> u64 {
        self.evaluation.seed.unwrap_or(self.experiment.seed)
    }

    pub fn model_config(&self, classes: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            height: self.pipeline.crop,
            width: self.pipeline.crop,
            channels,
            classes,
            stem_channels: self.model.stem_channels,
            stem_stride: self.model.stem_stride,
            stage_blocks: self.model.stage_blocks.clone(),
            norm: self.model.norm,
        }
    }

    /// Loads, splits and preprocesses the dataset.
    pub fn load_data(&self) -> Result<ExperimentData> {
        let d = &self.data;
        let (pool, test) = match (&d.synthetic, &d.idx) {
            (Some(spec), _) => (load_synthetic(spec, d.seed)?, None),
            (None, Some(idx)) => {
                for p in [Some(&idx.images), Some(&idx.labels), idx.test_images.as_ref(), idx.test_labels.as_ref()]
                    .into_iter()
                    .flatten()
                {
                    if !p.is_file() {
                        return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
                let pool = load_idx(&idx.images, &idx.labels, idx.classes, Split::Train)?;
                let test = match (&idx.test_images, &idx.test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l, Some(pool.classes), Split::Test)?),
                    _ => None,
                };
                (pool, test)
            }
            (None, None) => return Err(Error::Config("no dataset configured".into())),
        };
        let (train, val, rest) = split_per_class(&pool, d.train_per_class, d.val_per_class, d.seed)?;
        let test: Dataset = test.unwrap_or(rest);
        if test.is_empty() {
            return Err(Error::Config("the test split is empty".into()));
        }
        let data = TrainingData::new(self.pipeline, &train, &val)?;
        let test = PreparedSplit::new(&self.pipeline, &test)?;
        Ok(ExperimentData { data, test })
    }
}
