//! Preprocessing: resize the shortest side, crop, scale to `[0, 1]`,
//! distort, normalize.
//!
//! Scaling is linear, so it is applied on load; bilinear resizing of scaled
//! values equals scaling of resized values.

use serde::{Deserialize, Serialize};

use super::{Dataset, RawImage};
use crate::bilinear::Taps;
use crate::distortions::{apply_batch, offset_crop, DistortContext, DistortionSpec, RngStream};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pipeline {
    /// Shortest side after the first resize.
    pub resize: usize,
    /// Side of the square crop fed to the model.
    pub crop: usize,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline::desk()
    }
}

impl Pipeline {
    pub fn desk() -> Self {
        Pipeline { resize: 36, crop: 32 }
    }

    /// ImageNet-sized inputs: resize 256, crop 224.
    pub fn imagenet() -> Self {
        Pipeline { resize: 256, crop: 224 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!(
                "crop {} must be in [1, resize = {}]",
                self.crop, self.resize
            )));
        }
        Ok(())
    }

    /// Largest crop displacement that keeps the window inside the source.
    pub fn max_offset(&self) -> usize {
        (self.resize - self.crop) / 2
    }

    /// Unit-range image with the shortest side resized to `self.resize`.
    pub fn source(&self, raw: &RawImage) -> Result<Image> {
        self.validate()?;
        let (h, w) = (raw.height, raw.width);
        let (oh, ow) = if h <= w {
            (self.resize, ((w * self.resize) as f64 / h as f64).round() as usize)
        } else {
            (((h * self.resize) as f64 / w as f64).round() as usize, self.resize)
        };
        let unit = raw.to_unit();
        if (oh, ow) == (h, w) {
            return Ok(unit);
        }
        let taps = Taps::resize(h, w, oh, ow);
        let planes: Vec<Vec<f32>> = unit
            .to_planes()
            .iter()
            .map(|p| {
                let mut dst = vec![0.0; oh * ow];
                taps.apply_plane(p, 0.0, &mut dst);
                dst
            })
            .collect();
        Image::from_planes(oh, ow, &planes)
    }

    pub fn sources(&self, ds: &Dataset) -> Result<Vec<Image>> {
        ds.images.iter().map(|r| self.source(r)).collect()
    }

    pub fn center_crop(&self, source: &Image) -> Result<Image> {
        let (h, w) = (source.height(), source.width());
        if self.crop > h.min(w) {
            return Err(Error::invalid(format!("crop {} larger than {h}x{w} source", self.crop)));
        }
        source.crop((h - self.crop) / 2, (w - self.crop) / 2, self.crop, self.crop)
    }

    /// Crops and distorts a batch of resized sources. A crop component of
    /// `spec` displaces the crop window; the rest is applied afterwards.
    pub fn distort_batch(
        &self,
        sources: &[&Image],
        labels: &[usize],
        spec: &DistortionSpec,
        rngs: &mut [RngStream],
        ctx: &DistortContext<'_>,
    ) -> Result<Vec<Image>> {
        if rngs.len() != sources.len() {
            return Err(Error::invalid("one random stream per sample required"));
        }
        let (offset, rest) = spec.split_crop()?;
        let cropped = sources
            .iter()
            .zip(rngs.iter_mut())
            .map(|(src, rng)| {
                if offset == 0 {
                    self.center_crop(src)
                } else {
                    offset_crop(src, offset, self.crop, rng)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if rest.is_identity() {
            return Ok(cropped);
        }
        apply_batch(&rest, &cropped, labels, rngs, ctx)
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Leaves values unchanged.
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics over every pixel of `images`.
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::invalid("channel statistics need at least one image"))?;
        let c = first.channels();
        let mut sum = vec![0.0f64; c];
        let mut count = 0usize;
        for im in images {
            if im.channels() != c {
                return Err(Error::invalid("images disagree on channel count"));
            }
            for px in im.data().chunks(c) {
                for (s, &v) in sum.iter_mut().zip(px) {
                    *s += v as f64;
                }
            }
            count += im.height() * im.width();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; c];
        for im in images {
            for px in im.data().chunks(c) {
                for ((s, &v), m) in sq.iter_mut().zip(px).zip(&mean) {
                    *s += (v as f64 - m).powi(2);
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        if let Some(ch) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("channel {ch} has zero variance")));
        }
        Ok(ChannelStats { mean, std })
    }

    /// Mean in `[0, 1]` units, used as the rotation fill.
    pub fn fill(&self) -> Vec<f32> {
        self.mean.iter().map(|&m| m as f32).collect()
    }
}

/// Per-channel normalized `[N, C, H, W]` tensor.
pub fn normalize_batch<T: Scalar>(images: &[Image], stats: &ChannelStats) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("cannot batch zero images"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::invalid(format!(
            "statistics cover {} channels, images have {c}",
            stats.mean.len()
        )));
    }
    let plane = h * w;
    let mut data = vec![T::zero(); images.len() * c * plane];
    for (n, im) in images.iter().enumerate() {
        if !im.same_dims(first) {
            return Err(Error::invalid(format!("image {n} differs in shape from image 0")));
        }
        let base = n * c * plane;
        for (p, px) in im.data().chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[base + ch * plane + p] = T::of((v as f64 - stats.mean[ch]) / stats.std[ch]);
            }
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shortest_side_resize() {
        let raw = RawImage::new(20, 30, 1, vec![100; 600]).unwrap();
        let p = Pipeline { resize: 10, crop: 8 };
        let src = p.source(&raw).unwrap();
        assert_eq!((src.height(), src.width()), (10, 15));
        assert!(src.data().iter().all(|&v| (v - 100.0 / 255.0).abs() < 1e-6));
        assert_eq!(p.center_crop(&src).unwrap().width(), 8);
    }

    #[test]
    fn oversized_crop_rejected() {
        assert!(Pipeline { resize: 8, crop: 9 }.validate().is_err());
    }

    #[test]
    fn identity_stats_leave_values() {
        let im = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t: Tensor<f64> = normalize_batch(&[im], &ChannelStats::identity(2)).unwrap();
        assert_eq!(t.shape(), &[1, 2, 1, 2]);
        let want = [0.1f32, 0.3, 0.2, 0.4].map(|v| v as f64);
        assert_eq!(t.data(), &want);
    }
}
