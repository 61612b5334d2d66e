//! Layers and the small residual classifier used throughout the toolkit.
//!
//! The network is a scaled-down ResNet: a 3x3 stem, a sequence of stages of
//! basic residual blocks (the first block of every stage after the first
//! halves the resolution and doubles the width), global average pooling and
//! a dense head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, NormStats, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Scalar, Tensor};

/// Running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub stem_channels: usize,
    #[serde(default = "one")]
    pub stem_stride: usize,
    pub stage_blocks: Vec<usize>,
    #[serde(default = "yes")]
    pub norm: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// 32x32x3 input, 16-channel stem, three stages of two blocks.
    pub fn desk(classes: usize) -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            channels: 3,
            classes,
            stem_channels: 16,
            stem_stride: 1,
            stage_blocks: vec![2, 2, 2],
            norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("model needs at least 2 classes, got {}", self.classes)));
        }
        let extents = [self.height, self.width, self.channels, self.stem_channels, self.stem_stride];
        if extents.contains(&0) {
            return Err(Error::invalid(format!("model extents must be positive: {self:?}")));
        }
        if self.stage_blocks.is_empty() || self.stage_blocks.contains(&0) {
            return Err(Error::invalid("every stage needs at least one residual block"));
        }
        let (mut h, mut w) = (self.height.div_ceil(self.stem_stride), self.width.div_ceil(self.stem_stride));
        for stage in 1..self.stage_blocks.len() {
            if h < 2 || w < 2 {
                return Err(Error::invalid(format!(
                    "stage {stage} would reduce a {h}x{w} feature map below 1x1"
                )));
            }
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_channels(self.stage_blocks.len() - 1)
    }

    /// Parameters plus norm buffers of the built model; `None` on overflow.
    pub fn stored_values(&self) -> Option<usize> {
        let unit = |out_c: usize, in_c: usize, k: usize| -> Option<usize> {
            let extra = if self.norm { 4 * out_c } else { out_c };
            out_c.checked_mul(in_c)?.checked_mul(k * k)?.checked_add(extra)
        };
        let mut total = unit(self.stem_channels, self.channels, 3)?;
        let mut in_c = self.stem_channels;
        for (stage, &blocks) in self.stage_blocks.iter().enumerate() {
            let out_c = self.stem_channels.checked_mul(1usize.checked_shl(stage as u32)?)?;
            for block in 0..blocks {
                total = total
                    .checked_add(unit(out_c, in_c, 3)?)?
                    .checked_add(unit(out_c, out_c, 3)?)?;
                if needs_projection(stage, block) {
                    total = total.checked_add(unit(out_c, in_c, 1)?)?;
                }
                in_c = out_c;
            }
        }
        total.checked_add(in_c.checked_add(1)?.checked_mul(self.classes)?)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics and reports them.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

/// Named parameters plus batch-norm running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

/// Parameters placed on a tape.
pub type BoundParams = BTreeMap<String, Var>;

/// Output of a forward pass.
pub struct Forward<T> {
    pub logits: Var,
    /// Batch moments per norm layer (train mode only).
    pub moments: Vec<(String, BatchMoments<T>)>,
}

struct Init<'a, T> {
    rng: ChaCha8Rng,
    params: &'a mut BTreeMap<String, Tensor<T>>,
    buffers: &'a mut BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Init<'_, T> {
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        self.params.insert(name, Tensor::new(shape, data).expect("consistent shape"));
    }

    fn conv(&mut self, prefix: &str, out_c: usize, in_c: usize, k: usize, norm: bool) {
        self.he(format!("{prefix}.conv.weight"), vec![out_c, in_c, k, k], in_c * k * k);
        if norm {
            self.params.insert(format!("{prefix}.bn.gamma"), Tensor::ones(vec![out_c]));
            self.params.insert(format!("{prefix}.bn.beta"), Tensor::zeros(vec![out_c]));
            self.buffers.insert(format!("{prefix}.bn.running_mean"), Tensor::zeros(vec![out_c]));
            self.buffers.insert(format!("{prefix}.bn.running_var"), Tensor::ones(vec![out_c]));
        } else {
            self.params.insert(format!("{prefix}.conv.bias"), Tensor::zeros(vec![out_c]));
        }
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

fn needs_projection(stage: usize, block: usize) -> bool {
    block == 0 && stage > 0
}

/// Deterministic He-initialized parameters for `cfg`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: &mut params,
        buffers: &mut buffers,
    };
    init.conv("stem", cfg.stem_channels, cfg.channels, 3, cfg.norm);
    let mut in_c = cfg.stem_channels;
    for (stage, &blocks) in cfg.stage_blocks.iter().enumerate() {
        let out_c = cfg.stage_channels(stage);
        for block in 0..blocks {
            let p = block_prefix(stage, block);
            init.conv(&format!("{p}.conv1"), out_c, in_c, 3, cfg.norm);
            init.conv(&format!("{p}.conv2"), out_c, out_c, 3, cfg.norm);
            if needs_projection(stage, block) {
                init.conv(&format!("{p}.shortcut"), out_c, in_c, 1, cfg.norm);
            }
            in_c = out_c;
        }
    }
    init.he("head.weight".into(), vec![in_c, cfg.classes], in_c);
    params.insert("head.bias".into(), Tensor::zeros(vec![cfg.classes]));
    Ok(ModelParams {
        config: cfg.clone(),
        params,
        buffers,
    })
}

struct Ctx<'a, T> {
    params: &'a ModelParams<T>,
    bound: &'a BoundParams,
    mode: Mode,
    moments: Vec<(String, BatchMoments<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.bound
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter '{name}' is not bound")))
    }

    /// conv -> norm (or bias), no activation.
    fn conv_unit(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.var(&format!("{prefix}.conv.weight"))?;
        let pad = if tape.shape(w)[2] == 1 { Padding::Valid } else { Padding::Same };
        let y = tape.conv2d(x, w, stride, pad)?;
        if !self.params.config.norm {
            let b = self.var(&format!("{prefix}.conv.bias"))?;
            return tape.add_bias(y, b);
        }
        let gamma = self.var(&format!("{prefix}.bn.gamma"))?;
        let beta = self.var(&format!("{prefix}.bn.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, m) = tape.batch_norm(y, gamma, beta, NormStats::Batch)?;
                self.moments.push((format!("{prefix}.bn"), m.expect("batch stats")));
                Ok(y)
            }
            Mode::Eval => {
                let mean = &self.params.buffers[&format!("{prefix}.bn.running_mean")];
                let var = &self.params.buffers[&format!("{prefix}.bn.running_var")];
                let stats = NormStats::Running {
                    mean: mean.data(),
                    var: var.data(),
                };
                Ok(tape.batch_norm(y, gamma, beta, stats)?.0)
            }
        }
    }

    fn block(
        &mut self,
        tape: &mut Tape<T>,
        stage: usize,
        block: usize,
        x: Var,
        with_branch: bool,
    ) -> Result<Var> {
        let p = block_prefix(stage, block);
        let stride = if needs_projection(stage, block) { 2 } else { 1 };
        let skip = if needs_projection(stage, block) {
            self.conv_unit(tape, &format!("{p}.shortcut"), x, stride)?
        } else {
            x
        };
        if !with_branch {
            return Ok(tape.relu(skip));
        }
        let h = self.conv_unit(tape, &format!("{p}.conv1"), x, stride)?;
        let h = tape.relu(h);
        let h = self.conv_unit(tape, &format!("{p}.conv2"), h, 1)?;
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.config.input_shape(shape.first().copied().unwrap_or(0));
        if shape.len() != 4 || shape[0] == 0 || shape != want {
            return Err(Error::Shape {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundParams, input: Var, mode: Mode) -> Result<Forward<T>> {
        self.forward_with(tape, bound, input, mode, None)
    }

    fn forward_with(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        input: Var,
        mode: Mode,
        skip_branch: Option<(usize, usize)>,
    ) -> Result<Forward<T>> {
        self.check_input(tape.shape(input))?;
        let cfg = &self.config;
        let mut ctx = Ctx {
            params: self,
            bound,
            mode,
            moments: Vec::new(),
        };
        let h = ctx.conv_unit(tape, "stem", input, cfg.stem_stride)?;
        let mut h = tape.relu(h);
        for (stage, &blocks) in cfg.stage_blocks.iter().enumerate() {
            for block in 0..blocks {
                let branch = skip_branch != Some((stage, block));
                h = ctx.block(tape, stage, block, h, branch)?;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let z = tape.matmul(pooled, ctx.var("head.weight")?)?;
        let logits = tape.add_bias(z, ctx.var("head.bias")?)?;
        Ok(Forward {
            logits,
            moments: ctx.moments,
        })
    }

    /// Folds train-mode batch moments into the running buffers.
    pub fn update_running_stats(&mut self, moments: &[(String, BatchMoments<T>)]) {
        let keep = T::of(BN_MOMENTUM);
        let take = T::one() - keep;
        for (layer, m) in moments {
            for (suffix, batch) in [("running_mean", &m.mean), ("running_var", &m.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{layer}.{suffix}")) {
                    for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                        *r = keep * *r + take * b;
                    }
                }
            }
        }
    }

    /// Eval-mode logits, `[N, classes]`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &bound, x, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode class probabilities; rows sum to one.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.predict(batch)?;
        let probs = softmax_rows(logits.data(), self.config.classes);
        Tensor::new(logits.shape().to_vec(), probs)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            channels: 3,
            classes: 10,
            stem_channels: 4,
            stem_stride: 1,
            stage_blocks: vec![1, 1],
            norm: true,
        }
    }

    fn batch(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let shape = cfg.input_shape(n).to_vec();
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| dist.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn stored_values_matches_built_model() {
        for norm in [true, false] {
            let cfg = ModelConfig { norm, stage_blocks: vec![2, 1, 1], ..tiny() };
            let m = build_model::<f32>(&cfg, 0).unwrap();
            let built: usize = m.params.values().chain(m.buffers.values()).map(|t| t.numel()).sum();
            assert_eq!(cfg.stored_values(), Some(built));
        }
        let huge = ModelConfig { stage_blocks: vec![1; 70], ..tiny() };
        assert_eq!(huge.stored_values(), None);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = build_model::<f32>(&tiny(), 7).unwrap();
        let b = build_model::<f32>(&tiny(), 7).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f32>(&tiny(), 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn head_matches_class_count() {
        let m = build_model::<f64>(&tiny(), 1).unwrap();
        let logits = m.predict(&batch(3, &tiny(), 0)).unwrap();
        assert_eq!(logits.shape(), &[3, 10]);
    }

    #[test]
    fn he_variance_matches_fan_in() {
        let cfg = ModelConfig {
            stem_channels: 16,
            stage_blocks: vec![1, 2],
            ..tiny()
        };
        let m = build_model::<f64>(&cfg, 3).unwrap();
        // stages.1 conv2: 32 x 32 x 3 x 3 = 9216 weights; with conv1 >= 10k samples.
        let mut samples = Vec::new();
        for name in ["stages.1.blocks.0.conv2.conv.weight", "stages.1.blocks.1.conv1.conv.weight"] {
            samples.extend_from_slice(m.params[name].data());
        }
        assert!(samples.len() >= 10_000);
        let var = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
        let want = 2.0 / (32.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.2, "variance {var} vs {want}");
    }

    #[test]
    fn degenerate_spatial_dims_rejected() {
        let cfg = ModelConfig {
            height: 2,
            width: 2,
            stage_blocks: vec![1, 1, 1],
            ..tiny()
        };
        assert!(build_model::<f32>(&cfg, 0).is_err());
        let cfg = ModelConfig { classes: 1, ..tiny() };
        assert!(build_model::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut m = build_model::<f64>(&tiny(), 2).unwrap();
        for name in ["head.weight", "head.bias"] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let p = m.predict_proba(&batch(4, &tiny(), 1)).unwrap();
        for &v in p.data() {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_eval_is_pure() {
        let m = build_model::<f32>(&tiny(), 5).unwrap();
        let x = batch(6, &tiny(), 3).cast::<f32>();
        let p = m.predict_proba(&x).unwrap();
        for row in p.data().chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn input_shape_mismatch_rejected() {
        let m = build_model::<f32>(&tiny(), 5).unwrap();
        let err = m.predict(&Tensor::zeros(vec![2, 3, 8, 9])).unwrap_err();
        assert!(err.to_string().contains("model input"));
    }

    fn block_output(m: &ModelParams<f64>, x: &Tensor<f64>, branch: bool) -> Tensor<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = m
            .forward_with(&mut tape, &bound, xv, Mode::Eval, (!branch).then_some((1, 0)))
            .unwrap();
        tape.value(out.logits).clone()
    }

    #[test]
    fn residual_branch_zeroed_reproduces_skip_path() {
        let mut m = build_model::<f64>(&tiny(), 9).unwrap();
        // Give the running stats some non-trivial values first.
        for buf in m.buffers.values_mut() {
            for (i, v) in buf.data_mut().iter_mut().enumerate() {
                *v += 0.01 * i as f64;
            }
        }
        let x = batch(2, &tiny(), 4);
        let full = block_output(&m, &x, true);
        let skip_only = block_output(&m, &x, false);
        assert_ne!(full, skip_only, "disabling the branch must change outputs");

        for name in ["stages.1.blocks.0.conv2.bn.gamma", "stages.1.blocks.0.conv2.bn.beta"] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let zeroed = block_output(&m, &x, true);
        let skip_only = block_output(&m, &x, false);
        assert_eq!(zeroed, skip_only);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = build_model::<f64>(&tiny(), 1).unwrap();
        let moments = vec![(
            "stem.bn".to_string(),
            BatchMoments {
                mean: vec![1.0; 4],
                var: vec![3.0; 4],
            },
        )];
        m.update_running_stats(&moments);
        assert!((m.buffers["stem.bn.running_mean"].data()[0] - 0.1).abs() < 1e-15);
        assert!((m.buffers["stem.bn.running_var"].data()[0] - 1.2).abs() < 1e-15);
    }
}
