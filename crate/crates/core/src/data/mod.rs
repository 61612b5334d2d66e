//! Datasets, per-class splitting and the synthetic desk-scale generator.

mod idx;
mod pipeline;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use pipeline::{normalize_batch, ChannelStats, Pipeline};

use crate::distortions::RngStream;
use crate::error::{Error, Result};
use crate::image::Image;

/// 8-bit image in height x width x channel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || pixels.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "raw image {height}x{width}x{channels} with {} bytes",
                pixels.len()
            )));
        }
        Ok(RawImage {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Values scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Image {
        let data = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Image::new(self.height, self.width, self.channels, data).expect("validated extents")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<RawImage>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<RawImage>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(first) = images.first() {
            let dims = (first.height, first.width, first.channels);
            if let Some(i) = images.iter().position(|im| (im.height, im.width, im.channels) != dims) {
                return Err(Error::invalid(format!("image {i} differs in shape from image 0")));
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Rejects a dataset whose labels do not fit a `classes`-way model.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if self.classes != classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model predicts {classes}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn subset(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        }
    }
}

/// Disjoint `(train, val, rest)` with exactly `train_n` and `val_n` samples
/// of every class in the first two; `rest` keeps the remainder as the test
/// split.
pub fn split_per_class(ds: &Dataset, train_n: usize, val_n: usize, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let mut by_class = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let root = RngStream::new(seed);
    let (mut train, mut val, mut rest) = (Vec::new(), Vec::new(), Vec::new());
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < train_n + val_n {
            return Err(Error::invalid(format!(
                "class {class} has {} samples, split needs {}",
                idx.len(),
                train_n + val_n
            )));
        }
        idx.shuffle(&mut root.split(class as u64));
        train.extend_from_slice(&idx[..train_n]);
        val.extend_from_slice(&idx[train_n..train_n + val_n]);
        rest.extend_from_slice(&idx[train_n + val_n..]);
    }
    for v in [&mut train, &mut val, &mut rest] {
        v.sort_unstable();
    }
    Ok((
        ds.subset(&train, Split::Train),
        ds.subset(&val, Split::Val),
        ds.subset(&rest, Split::Test),
    ))
}

/// Texture family of the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Each class is a fixed pair of crossed gratings at a class-specific
    /// orientation.
    #[default]
    Oriented,
    /// Each class is a single or plaid grating at a class-specific spatial
    /// frequency; the orientation is drawn per sample, so labels survive
    /// rotation.
    Isotropic,
}

/// Parameters of the synthetic texture dataset.
///
/// Every sample is a low-contrast class texture with a class tint, shifted
/// by a random phase, on top of a smooth random background and a brightness
/// offset, so classes are separable only through the texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    #[serde(default = "three")]
    pub channels: usize,
    #[serde(default)]
    pub pattern: Pattern,
    /// Texture amplitude in `[0, 1]` units.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Background field amplitude.
    #[serde(default = "default_clutter")]
    pub clutter: f64,
}

fn three() -> usize {
    3
}

fn default_contrast() -> f64 {
    0.1
}

fn default_clutter() -> f64 {
    0.15
}

impl SyntheticSpec {
    pub fn desk() -> Self {
        SyntheticSpec {
            classes: 10,
            per_class: 120,
            side: 36,
            channels: 3,
            pattern: Pattern::Oriented,
            contrast: default_contrast(),
            clutter: default_clutter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class == 0 || self.side < 4 || self.channels == 0 {
            return Err(Error::Config(format!("degenerate synthetic dataset {self:?}")));
        }
        if !(self.contrast > 0.0 && self.contrast <= 0.5 && (0.0..=0.5).contains(&self.clutter)) {
            return Err(Error::Config("synthetic contrast must be in (0, 0.5], clutter in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Wave vector `(ky, kx)` in radians per pixel.
type Grating = (f64, f64);

struct ClassPattern {
    /// Two gratings for oriented classes; for isotropic classes only the
    /// frequency of the first is used.
    gratings: [Grating; 2],
    plaid: bool,
    tint: Vec<f64>,
}

fn class_pattern(class: usize, spec: &SyntheticSpec, rng: &mut RngStream) -> ClassPattern {
    let g = |theta: f64, f: f64| (f * theta.sin(), f * theta.cos());
    let (gratings, plaid) = match spec.pattern {
        Pattern::Oriented => {
            // Orientations spread evenly across classes, frequencies
            // alternate so neighbouring orientations stay distinguishable.
            let base = PI * class as f64 / spec.classes as f64;
            let freq = if class.is_multiple_of(2) { 2.0 * PI / 5.0 } else { 2.0 * PI / 8.0 };
            let second = base + PI / 2.0 + 0.3 * (rng.uniform() - 0.5);
            ([g(base, freq), g(second, freq * 0.7)], true)
        }
        Pattern::Isotropic => {
            // Five frequency levels times single/plaid.
            let period = 3.0 * 1.26f64.powi(((class / 2) % 5) as i32);
            let freq = 2.0 * PI / period;
            ([(0.0, freq), (0.0, freq)], class % 2 == 1)
        }
    };
    let tint = (0..spec.channels).map(|_| 0.6 + 0.4 * rng.uniform()).collect();
    ClassPattern { gratings, plaid, tint }
}

fn smooth_field(side: usize, rng: &mut RngStream) -> Vec<f64> {
    // A few random low-frequency cosines.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let a: f64 = StandardNormal.sample(rng);
            let ky = 2.0 * PI * rng.uniform() / side as f64 * 1.5;
            let kx = 2.0 * PI * rng.uniform() / side as f64 * 1.5;
            (a * 0.5, ky, kx, 2.0 * PI * rng.uniform())
        })
        .collect();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            out.push(waves.iter().map(|&(a, ky, kx, ph)| a * (ky * y as f64 + kx * x as f64 + ph).cos()).sum());
        }
    }
    out
}

/// Deterministic class-balanced synthetic dataset; labels cycle through
/// the classes.
pub fn load_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let root = RngStream::new(seed);
    let patterns: Vec<ClassPattern> = (0..spec.classes)
        .map(|c| class_pattern(c, spec, &mut root.split(c as u64)))
        .collect();
    let samples = root.split(u64::MAX);
    let (n, side, ch) = (spec.per_class * spec.classes, spec.side, spec.channels);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.classes;
        let pat = &patterns[label];
        let mut rng = samples.split(i as u64);
        let gratings = match spec.pattern {
            Pattern::Oriented => pat.gratings,
            Pattern::Isotropic => {
                let theta = PI * rng.uniform();
                let f = pat.gratings[0].1;
                let (s, c) = theta.sin_cos();
                [(f * s, f * c), (f * c, -f * s)]
            }
        };
        let phases = [2.0 * PI * rng.uniform(), 2.0 * PI * rng.uniform()];
        let brightness = 0.1 * (rng.uniform() - 0.5);
        let field = smooth_field(side, &mut rng);
        let channel_gain: Vec<f64> = (0..ch).map(|_| 0.7 + 0.6 * rng.uniform()).collect();
        let mut pixels = Vec::with_capacity(side * side * ch);
        for y in 0..side {
            for x in 0..side {
                let wave = |k: usize| (gratings[k].0 * y as f64 + gratings[k].1 * x as f64 + phases[k]).sin();
                let tex = if pat.plaid { 0.5 * (wave(0) + wave(1)) } else { wave(0) };
                let bg = field[y * side + x];
                for c in 0..ch {
                    let v = 0.5 + brightness + spec.clutter * bg * channel_gain[c] + spec.contrast * tex * pat.tint[c];
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        images.push(RawImage::new(side, side, ch, pixels)?);
        labels.push(label);
    }
    Dataset::new(images, labels, spec.classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            per_class: 7,
            side: 12,
            ..SyntheticSpec::desk()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = load_synthetic(&tiny(), 5).unwrap();
        assert_eq!(a, load_synthetic(&tiny(), 5).unwrap());
        assert_ne!(a.images, load_synthetic(&tiny(), 6).unwrap().images);
        assert_eq!(a.class_counts(), vec![7, 7, 7]);
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ds = load_synthetic(&tiny(), 1).unwrap();
        for seed in 0..5 {
            let (tr, va, rest) = split_per_class(&ds, 4, 2, seed).unwrap();
            assert_eq!(tr.class_counts(), vec![4, 4, 4]);
            assert_eq!(va.class_counts(), vec![2, 2, 2]);
            assert_eq!(rest.len(), 3);
            for im in &va.images {
                assert!(!tr.images.contains(im));
            }
        }
        let err = split_per_class(&ds, 6, 2, 0).unwrap_err().to_string();
        assert!(err.contains("class 0"), "{err}");
    }

    #[test]
    fn label_range_validated() {
        let img = RawImage::new(2, 2, 1, vec![0; 4]).unwrap();
        assert!(Dataset::new(vec![img.clone()], vec![3], 3, Split::Train).is_err());
        let ds = Dataset::new(vec![img], vec![2], 3, Split::Train).unwrap();
        assert!(ds.check_classes(3).is_ok());
        assert!(ds.check_classes(10).is_err());
    }
}
