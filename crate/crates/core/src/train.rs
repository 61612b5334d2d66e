//! Training procedures: baseline, stability training (plain and
//! symmetric), data augmentation and FGSM adversarial training, with early
//! stopping on the undistorted validation split.
//!
//! Randomness is split into independent streams so the degenerate settings
//! of every method follow the baseline trajectory exactly: one stream orders
//! the batches, and every `(epoch, sample)` pair owns a distortion stream.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{normalize_batch, ChannelStats, Dataset, Pipeline};
use crate::distortions::{DistortContext, DistortionSpec, LossGradient, RngStream};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{build_model, Mode, ModelConfig, ModelParams};
use crate::objectives::graph;
use crate::optim::{OptimizerState, DEFAULT_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

const SHUFFLE_STREAM: u64 = 1;
const DISTORT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Stability,
    StabilitySym,
    Augment,
    Adversarial,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::Stability,
        Method::StabilitySym,
        Method::Augment,
        Method::Adversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Stability => "stability",
            Method::StabilitySym => "stability_sym",
            Method::Augment => "augment",
            Method::Adversarial => "adversarial",
        }
    }

    /// Name of the method's own hyperparameter.
    pub fn hyperparameter(self) -> Option<&'static str> {
        match self {
            Method::Baseline => None,
            Method::Stability | Method::StabilitySym => Some("alpha"),
            Method::Augment => Some("p"),
            Method::Adversarial => Some("mu"),
        }
    }

    pub fn is_stability(self) -> bool {
        matches!(self, Method::Stability | Method::StabilitySym)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
        })
    }
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default = "DistortionSpec::identity")]
    pub distortion: DistortionSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    /// Augmentation draws one Bernoulli per batch instead of per sample.
    #[serde(default)]
    pub per_batch_draw: bool,
    /// Whether the stability term treats the clean prediction as a fixed
    /// target. Defaults to true for the plain divergence, whose first
    /// argument is the reference, and false for the symmetric one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detach_reference: Option<bool>,
}

impl TrainConfig {
    /// Desk-scale baseline: 15 epochs, learning rate 0.01, batch 32.
    pub fn baseline(seed: u64) -> Self {
        TrainConfig {
            method: Method::Baseline,
            alpha: None,
            p: None,
            mu: None,
            distortion: DistortionSpec::identity(),
            epochs: 15,
            batch_size: 32,
            lr: 0.01,
            momentum: DEFAULT_MOMENTUM,
            seed,
            per_batch_draw: false,
            detach_reference: None,
        }
    }

    /// Desk-scale fine-tuning run of `method` (5 epochs) with hyperparameter
    /// `value` for the method's own knob.
    pub fn fine_tune(method: Method, value: Option<f64>, distortion: DistortionSpec, seed: u64) -> Self {
        let mut cfg = TrainConfig {
            method,
            distortion,
            epochs: 5,
            ..TrainConfig::baseline(seed)
        };
        match method {
            Method::Stability | Method::StabilitySym => cfg.alpha = value,
            Method::Augment => cfg.p = value,
            Method::Adversarial => cfg.mu = value,
            Method::Baseline => {}
        }
        cfg
    }

    pub fn detaches_reference(&self) -> bool {
        self.detach_reference.unwrap_or(self.method == Method::Stability)
    }

    /// The value of the method's own hyperparameter.
    pub fn hyperparameter(&self) -> Option<f64> {
        match self.method {
            Method::Baseline => None,
            Method::Stability | Method::StabilitySym => self.alpha,
            Method::Augment => self.p,
            Method::Adversarial => self.mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        let given = [("alpha", self.alpha), ("p", self.p), ("mu", self.mu)];
        let own = self.method.hyperparameter();
        for (name, value) in given {
            match (Some(name) == own, value) {
                (true, None) => return cfg_err(format!("method {} requires {name}", self.method)),
                (false, Some(_)) => return cfg_err(format!("{name} does not apply to method {}", self.method)),
                _ => {}
            }
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return cfg_err(format!("alpha must be finite and >= 0, got {a}"));
            }
        }
        if let Some(p) = self.p {
            if !(0.0..=1.0).contains(&p) {
                return cfg_err(format!("p must be in [0, 1], got {p}"));
            }
        }
        if let Some(mu) = self.mu {
            if !(0.0..=1.0).contains(&mu) {
                return cfg_err(format!("mu must be in [0, 1], got {mu}"));
            }
        }
        self.distortion.validate().map_err(|e| Error::Config(e.to_string()))?;
        match self.method {
            Method::Baseline if !self.distortion.is_identity() => {
                return cfg_err("baseline training uses undistorted data only".into());
            }
            Method::Adversarial if !matches!(self.distortion, DistortionSpec::Fgsm { .. }) => {
                return cfg_err(format!(
                    "adversarial training needs an fgsm distortion, got {}",
                    self.distortion
                ));
            }
            _ => {}
        }
        if self.detach_reference.is_some() && !self.method.is_stability() {
            return cfg_err("detach_reference only applies to stability training".into());
        }
        if self.per_batch_draw && self.method != Method::Augment {
            return cfg_err("per_batch_draw only applies to augmentation".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return cfg_err("epochs and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return cfg_err(format!(
                "need lr >= 0 and momentum in [0, 1), got {} and {}",
                self.lr, self.momentum
            ));
        }
        Ok(())
    }

    /// Compact `name=value` description of the method hyperparameter.
    pub fn hyperparams_label(&self) -> String {
        match (self.method.hyperparameter(), self.hyperparameter()) {
            (Some(name), Some(v)) => format!("{name}={v}"),
            _ => String::new(),
        }
    }
}

/// Pre-resized sources and their center crops.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub sources: Vec<Image>,
    pub clean: Vec<Image>,
    pub labels: Vec<usize>,
}

impl PreparedSplit {
    pub fn new(pipeline: &Pipeline, ds: &Dataset) -> Result<Self> {
        let sources = pipeline.sources(ds)?;
        let clean = sources.iter().map(|s| pipeline.center_crop(s)).collect::<Result<_>>()?;
        Ok(PreparedSplit {
            sources,
            clean,
            labels: ds.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything a training run reads: the pipeline, training-split channel
/// statistics and the prepared train and validation splits.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub pipeline: Pipeline,
    pub stats: ChannelStats,
    pub classes: usize,
    pub train: PreparedSplit,
    pub val: PreparedSplit,
}

impl TrainingData {
    pub fn new(pipeline: Pipeline, train: &Dataset, val: &Dataset) -> Result<Self> {
        pipeline.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("training and validation splits must be non-empty"));
        }
        if train.classes != val.classes {
            return Err(Error::invalid("train and validation splits disagree on class count"));
        }
        let train_p = PreparedSplit::new(&pipeline, train)?;
        let stats = ChannelStats::from_images(&train_p.clean)?;
        Ok(TrainingData {
            pipeline,
            stats,
            classes: train.classes,
            train: train_p,
            val: PreparedSplit::new(&pipeline, val)?,
        })
    }
}

/// Loss gradient with respect to `[0, 1]` input images, with the model in
/// evaluation mode so samples do not interact.
pub struct ModelGradient<'a, T> {
    pub model: &'a ModelParams<T>,
    pub stats: &'a ChannelStats,
}

impl<T: Scalar> LossGradient for ModelGradient<'_, T> {
    fn loss_gradients(&self, images: &[Image], labels: &[usize]) -> Result<Vec<Image>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = normalize_batch::<T>(images, self.stats)?;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, false);
        let xv = tape.leaf(x);
        let out = self.model.forward(&mut tape, &bound, xv, Mode::Eval)?;
        let mean = graph::cross_entropy(&mut tape, out.logits, labels)?;
        // Per-sample losses summed, so each image sees its own gradient.
        let total = tape.scale(mean, T::of(images.len() as f64));
        tape.backward(total)?;
        let g = tape.grad(xv).expect("input is a leaf");
        let (c, h, w) = (images[0].channels(), images[0].height(), images[0].width());
        let plane = h * w;
        images
            .iter()
            .enumerate()
            .map(|(n, _)| {
                let base = n * c * plane;
                let mut data = Vec::with_capacity(c * plane);
                for p in 0..plane {
                    for ch in 0..c {
                        data.push((g.data()[base + ch * plane + p].f64() / self.stats.std[ch]) as f32);
                    }
                }
                Image::new(h, w, c, data)
            })
            .collect()
    }
}

/// Top-1 accuracy of `model` on already distorted images.
pub fn accuracy<T: Scalar>(
    model: &ModelParams<T>,
    images: &[Image],
    labels: &[usize],
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut correct = 0usize;
    for (imgs, labs) in images.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
        let x = normalize_batch::<T>(imgs, stats)?;
        let logits = model.predict(&x)?;
        let k = model.config.classes;
        for (row, &l) in logits.data().chunks(k).zip(labs) {
            if argmax(row) == l {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// First index of the maximum; NaN rows predict class 0.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub wall_time: f64,
    /// Fraction of training samples that were distorted this epoch.
    pub augmented_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Validation accuracy of the initial parameters.
    pub initial_val_acc: f64,
    pub epochs: Vec<EpochRecord>,
    /// One-based epoch with the best validation accuracy.
    pub selected_epoch: usize,
    /// Split used for early stopping; always the undistorted validation set.
    pub selection_split: String,
    pub checkpoints: Vec<PathBuf>,
    pub selected_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn selected(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch - 1]
    }

    /// Same record with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.wall_time = 0.0;
        }
        r
    }
}

/// Earliest epoch with maximal validation accuracy (one-based).
pub fn select_epoch(val_acc: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &a) in val_acc.iter().enumerate() {
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| i + 1)
}

pub struct TrainOutcome {
    pub record: RunRecord,
    /// Parameters of the selected epoch.
    pub best: Checkpoint<f32>,
}

/// Called after every optimizer step with `(epoch, step, model)`.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, usize, &ModelParams<f32>);

pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub data: &'a TrainingData,
    pub model_cfg: &'a ModelConfig,
    /// Starting parameters; a fresh seeded model when absent.
    pub init: Option<&'a ModelParams<f32>>,
    /// Run directory for checkpoints and the epoch log.
    pub out_dir: Option<&'a Path>,
}

struct StepLoss {
    loss: f64,
    distorted: usize,
}

impl Trainer<'_> {
    pub fn run(&self, mut hook: Option<StepHook<'_>>) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        cfg.validate()?;
        self.model_cfg.validate()?;
        let data = self.data;
        if self.model_cfg.classes != data.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model predicts {}",
                data.classes, self.model_cfg.classes
            )));
        }
        let mut model = match self.init {
            Some(m) => {
                if &m.config != self.model_cfg {
                    return Err(Error::Config("initial checkpoint architecture differs from the model config".into()));
                }
                m.clone()
            }
            None => build_model(self.model_cfg, RngStream::new(cfg.seed).split(INIT_STREAM).seed())?,
        };
        model.check_input(&self.model_cfg.input_shape(1))?;
        if data.pipeline.crop != self.model_cfg.height || data.pipeline.crop != self.model_cfg.width {
            return Err(Error::Config(format!(
                "pipeline crops {} pixels but the model expects {}x{}",
                data.pipeline.crop, self.model_cfg.height, self.model_cfg.width
            )));
        }
        let mut opt = OptimizerState::new(&model.params, cfg.lr, cfg.momentum)?;
        let root = RngStream::new(cfg.seed);
        let eval_batch = cfg.batch_size.max(64);
        let initial_val_acc = accuracy(&model, &data.val.clean, &data.val.labels, &data.stats, eval_batch)?;

        let mut log = match self.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("log.csv");
                let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "epoch,train_loss,val_acc,wall_time").map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };

        let start = Instant::now();
        let n = data.train.len();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut checkpoints = Vec::new();
        let mut best: Option<Checkpoint<f32>> = None;
        for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut root.split(SHUFFLE_STREAM).split(epoch as u64));
            let distort_root = root.split(DISTORT_STREAM).split(epoch as u64);
            let (mut loss_sum, mut distorted) = (0.0, 0usize);
            for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
                let mut rngs: Vec<RngStream> = batch.iter().map(|&i| distort_root.split(i as u64)).collect();
                let batch_rng = distort_root.split(u64::MAX - step as u64);
                let out = self
                    .step(&mut model, &mut opt, batch, &mut rngs, batch_rng)
                    .map_err(|e| match e {
                        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} step {step}: {msg}")),
                        other => other,
                    })?;
                loss_sum += out.loss * batch.len() as f64;
                distorted += out.distorted;
                if let Some(h) = hook.as_mut() {
                    h(epoch, step, &model);
                }
            }
            let val_acc = accuracy(&model, &data.val.clean, &data.val.labels, &data.stats, eval_batch)?;
            let record = EpochRecord {
                epoch,
                train_loss: loss_sum / n as f64,
                val_acc,
                wall_time: start.elapsed().as_secs_f64(),
                augmented_fraction: distorted as f64 / n as f64,
            };
            let ckpt = Checkpoint {
                model: model.clone(),
                optimizer: Some(opt.clone()),
                epoch: epoch as u32,
                val_score: val_acc,
            };
            if let Some((f, path)) = log.as_mut() {
                writeln!(
                    f,
                    "{},{},{},{:.3}",
                    record.epoch, record.train_loss, record.val_acc, record.wall_time
                )
                .map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(dir) = self.out_dir {
                let path = dir.join(format!("epoch_{epoch:03}.stbl"));
                ckpt.save(&path)?;
                checkpoints.push(path);
            }
            if best.as_ref().is_none_or(|b| val_acc > b.val_score) {
                best = Some(ckpt);
            }
            epochs.push(record);
        }
        let val: Vec<f64> = epochs.iter().map(|e| e.val_acc).collect();
        let selected_epoch = select_epoch(&val).expect("at least one epoch");
        let best = best.expect("at least one epoch");
        debug_assert_eq!(best.epoch as usize, selected_epoch);
        let selected_checkpoint = match self.out_dir {
            Some(dir) => {
                let path = dir.join("best.stbl");
                best.save(&path)?;
                Some(path)
            }
            None => None,
        };
        let record = RunRecord {
            config: cfg.clone(),
            initial_val_acc,
            epochs,
            selected_epoch,
            selection_split: "val (undistorted)".into(),
            checkpoints,
            selected_checkpoint,
        };
        if let Some(dir) = self.out_dir {
            let path = dir.join("run.json");
            let json = serde_json::to_string_pretty(&record).expect("record serializes");
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
        Ok(TrainOutcome { record, best })
    }

    fn perturb(
        &self,
        model: &ModelParams<f32>,
        idx: &[usize],
        labels: &[usize],
        rngs: &mut [RngStream],
    ) -> Result<Vec<Image>> {
        let data = self.data;
        let fill = data.stats.fill();
        let grad = ModelGradient {
            model,
            stats: &data.stats,
        };
        let ctx = DistortContext {
            fill: Some(&fill),
            gradient: Some(&grad),
            crop_side: Some(data.pipeline.crop),
        };
        let sources: Vec<&Image> = idx.iter().map(|&i| &data.train.sources[i]).collect();
        data.pipeline.distort_batch(&sources, labels, &self.cfg.distortion, rngs, &ctx)
    }

    fn step(
        &self,
        model: &mut ModelParams<f32>,
        opt: &mut OptimizerState<f32>,
        idx: &[usize],
        rngs: &mut [RngStream],
        mut batch_rng: RngStream,
    ) -> Result<StepLoss> {
        let cfg = self.cfg;
        let data = self.data;
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
        let mut inputs: Vec<Image> = idx.iter().map(|&i| data.train.clean[i].clone()).collect();
        let mut distorted = 0;

        // Inputs that replace (augmentation) or accompany (stability,
        // adversarial) the clean batch.
        let mut companion = None;
        match cfg.method {
            Method::Baseline => {}
            Method::Augment => {
                let p = cfg.p.expect("validated");
                let chosen: Vec<usize> = if cfg.per_batch_draw {
                    if batch_rng.uniform() < p {
                        (0..idx.len()).collect()
                    } else {
                        Vec::new()
                    }
                } else {
                    (0..idx.len()).filter(|&k| rngs[k].uniform() < p).collect()
                };
                if !chosen.is_empty() {
                    let sub_idx: Vec<usize> = chosen.iter().map(|&k| idx[k]).collect();
                    let sub_labels: Vec<usize> = chosen.iter().map(|&k| labels[k]).collect();
                    let mut sub_rngs: Vec<RngStream> = chosen.iter().map(|&k| rngs[k].clone()).collect();
                    let out = self.perturb(model, &sub_idx, &sub_labels, &mut sub_rngs)?;
                    for (&k, img) in chosen.iter().zip(out) {
                        inputs[k] = img;
                    }
                }
                distorted = chosen.len();
            }
            Method::Stability | Method::StabilitySym | Method::Adversarial => {
                companion = Some(self.perturb(model, idx, &labels, rngs)?);
                distorted = idx.len();
            }
        }

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.constant(normalize_batch::<f32>(&inputs, &data.stats)?);
        let clean = model.forward(&mut tape, &bound, x, Mode::Train)?;
        let task = graph::cross_entropy(&mut tape, clean.logits, &labels)?;
        let loss = match (cfg.method, companion) {
            (Method::Stability | Method::StabilitySym, Some(pert)) => {
                let xp = tape.constant(normalize_batch::<f32>(&pert, &data.stats)?);
                // Batch statistics of the perturbed pass are not committed.
                let fp = model.forward(&mut tape, &bound, xp, Mode::Train)?;
                let symmetric = cfg.method == Method::StabilitySym;
                let stab = graph::stability(&mut tape, clean.logits, fp.logits, symmetric, cfg.detaches_reference())?;
                graph::combined(&mut tape, task, stab, cfg.alpha.expect("validated"))?
            }
            (Method::Adversarial, Some(adv)) => {
                let xa = tape.constant(normalize_batch::<f32>(&adv, &data.stats)?);
                let fa = model.forward(&mut tape, &bound, xa, Mode::Train)?;
                let adv_task = graph::cross_entropy(&mut tape, fa.logits, &labels)?;
                graph::adversarial(&mut tape, task, adv_task, cfg.mu.expect("validated"))?
            }
            _ => task,
        };
        let value = tape.value(loss).item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {value}")));
        }
        tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor<f32>> = bound
            .iter()
            .map(|(name, &v)| (name.clone(), tape.grad(v).expect("parameters are leaves")))
            .collect();
        opt.step(&mut model.params, &grads)?;
        model.update_running_stats(&clean.moments);
        Ok(StepLoss { loss: value, distorted })
    }
}

/// Loads the model stored in a checkpoint file.
pub fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    Ok(Checkpoint::<f32>::load(path)?.model)
}
