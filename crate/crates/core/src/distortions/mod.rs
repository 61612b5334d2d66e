//! Image distortions: Gaussian noise, JPEG-style compression, thumbnail
//! resizing, FGSM perturbation, random rotation, offset cropping and
//! left-to-right composition.
//!
//! Every generator takes and returns images in `[0, 1]`. Randomized
//! generators draw from a per-sample [`RngStream`]; identity parameter
//! values consume no draws.

mod jpeg;
mod rng;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

pub use jpeg::jpeg_compress;
pub use rng::RngStream;

use crate::bilinear::Taps;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ThumbnailMode {
    /// Center `A x A` crop, resized back to full size.
    CropResize,
    /// Whole image downsampled to `A x A`, then upsampled back.
    Downsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistortionKind {
    Gaussian,
    Jpeg,
    Thumbnail(ThumbnailMode),
    Fgsm,
    Rotation,
    Crop,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistortionSpec {
    Gaussian { sigma: f64 },
    Jpeg { quality: u32 },
    Thumbnail { side: u32, mode: ThumbnailMode },
    Fgsm { epsilon: f64 },
    Rotation { max_degrees: f64 },
    Crop { offset: u32 },
    Compose(Vec<DistortionSpec>),
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 6] = [
        DistortionKind::Gaussian,
        DistortionKind::Jpeg,
        DistortionKind::Thumbnail(ThumbnailMode::CropResize),
        DistortionKind::Fgsm,
        DistortionKind::Rotation,
        DistortionKind::Crop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::Gaussian => "gaussian",
            DistortionKind::Jpeg => "jpeg",
            DistortionKind::Thumbnail(ThumbnailMode::CropResize) => "thumbnail",
            DistortionKind::Thumbnail(ThumbnailMode::Downsample) => "thumbnail_down",
            DistortionKind::Fgsm => "fgsm",
            DistortionKind::Rotation => "rotation",
            DistortionKind::Crop => "crop",
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            DistortionKind::Gaussian => "sigma",
            DistortionKind::Jpeg => "q",
            DistortionKind::Thumbnail(_) => "A",
            DistortionKind::Fgsm => "epsilon",
            DistortionKind::Rotation => "rho",
            DistortionKind::Crop => "C",
        }
    }

    /// Whether the kind's parameter is an integer (rounded on construction).
    pub fn is_integer(self) -> bool {
        matches!(self, DistortionKind::Jpeg | DistortionKind::Thumbnail(_) | DistortionKind::Crop)
    }

    /// Larger parameter means weaker distortion.
    pub fn decreasing(self) -> bool {
        matches!(self, DistortionKind::Jpeg | DistortionKind::Thumbnail(_))
    }

    /// Parameter value that leaves images unchanged, if one exists.
    /// `side` is the image side length.
    pub fn identity_level(self, side: usize) -> Option<f64> {
        match self {
            DistortionKind::Jpeg => None,
            DistortionKind::Thumbnail(_) => Some(side as f64),
            _ => Some(0.0),
        }
    }

    pub fn with_intensity(self, value: f64) -> Result<DistortionSpec> {
        if !value.is_finite() {
            return Err(Error::invalid(format!("{} parameter must be finite", self.name())));
        }
        let int = || -> Result<u32> {
            let r = value.round();
            if r < 0.0 || r > u32::MAX as f64 {
                return Err(Error::invalid(format!("{} parameter {value} out of range", self.name())));
            }
            Ok(r as u32)
        };
        let spec = match self {
            DistortionKind::Gaussian => DistortionSpec::Gaussian { sigma: value },
            DistortionKind::Jpeg => DistortionSpec::Jpeg { quality: int()? },
            DistortionKind::Thumbnail(mode) => DistortionSpec::Thumbnail { side: int()?, mode },
            DistortionKind::Fgsm => DistortionSpec::Fgsm { epsilon: value },
            DistortionKind::Rotation => DistortionSpec::Rotation { max_degrees: value },
            DistortionKind::Crop => DistortionSpec::Crop { offset: int()? },
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = DistortionKind::ALL
            .into_iter()
            .chain([DistortionKind::Thumbnail(ThumbnailMode::Downsample)]);
        for k in all {
            if k.name() == s.trim() {
                return Ok(k);
            }
        }
        Err(Error::invalid(format!("unknown distortion kind {s:?}")))
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl DistortionSpec {
    pub fn identity() -> Self {
        DistortionSpec::Compose(Vec::new())
    }

    pub fn kind(&self) -> Option<DistortionKind> {
        Some(match self {
            DistortionSpec::Gaussian { .. } => DistortionKind::Gaussian,
            DistortionSpec::Jpeg { .. } => DistortionKind::Jpeg,
            DistortionSpec::Thumbnail { mode, .. } => DistortionKind::Thumbnail(*mode),
            DistortionSpec::Fgsm { .. } => DistortionKind::Fgsm,
            DistortionSpec::Rotation { .. } => DistortionKind::Rotation,
            DistortionSpec::Crop { .. } => DistortionKind::Crop,
            DistortionSpec::Compose(_) => return None,
        })
    }

    /// The scalar parameter of a non-compose spec.
    pub fn intensity(&self) -> Option<f64> {
        match *self {
            DistortionSpec::Gaussian { sigma } => Some(sigma),
            DistortionSpec::Jpeg { quality } => Some(quality as f64),
            DistortionSpec::Thumbnail { side, .. } => Some(side as f64),
            DistortionSpec::Fgsm { epsilon } => Some(epsilon),
            DistortionSpec::Rotation { max_degrees } => Some(max_degrees),
            DistortionSpec::Crop { offset } => Some(offset as f64),
            DistortionSpec::Compose(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        match self {
            DistortionSpec::Gaussian { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("gaussian sigma must be finite and >= 0, got {sigma}"))
            }
            DistortionSpec::Jpeg { quality } if !(1..=100).contains(quality) => {
                bad(format!("jpeg quality must be in [1, 100], got {quality}"))
            }
            DistortionSpec::Thumbnail { side: 0, .. } => bad("thumbnail side must be >= 1".into()),
            DistortionSpec::Fgsm { epsilon } if !(*epsilon >= 0.0 && epsilon.is_finite()) => {
                bad(format!("fgsm epsilon must be finite and >= 0, got {epsilon}"))
            }
            DistortionSpec::Rotation { max_degrees } if !(0.0..=180.0).contains(max_degrees) => {
                bad(format!("rotation angle must be in [0, 180], got {max_degrees}"))
            }
            DistortionSpec::Compose(children) => children.iter().try_for_each(|c| c.validate()),
            _ => Ok(()),
        }
    }

    pub fn is_identity(&self) -> bool {
        match *self {
            DistortionSpec::Gaussian { sigma } => sigma == 0.0,
            DistortionSpec::Jpeg { .. } | DistortionSpec::Thumbnail { .. } => false,
            DistortionSpec::Fgsm { epsilon } => epsilon == 0.0,
            DistortionSpec::Rotation { max_degrees } => max_degrees == 0.0,
            DistortionSpec::Crop { offset } => offset == 0,
            DistortionSpec::Compose(ref c) => c.iter().all(|c| c.is_identity()),
        }
    }

    /// Leaves in application order.
    pub fn leaves(&self) -> Vec<&DistortionSpec> {
        match self {
            DistortionSpec::Compose(children) => children.iter().flat_map(|c| c.leaves()).collect(),
            leaf => vec![leaf],
        }
    }

    pub fn needs_model(&self) -> bool {
        self.leaves().iter().any(|l| matches!(l, DistortionSpec::Fgsm { .. }))
    }

    /// Separates the crop displacement, which acts on the uncropped source,
    /// from the distortions applied afterwards. At most one crop is allowed.
    pub fn split_crop(&self) -> Result<(u32, DistortionSpec)> {
        let mut offset = None;
        let mut rest = Vec::new();
        for leaf in self.leaves() {
            match leaf {
                DistortionSpec::Crop { offset: c } => {
                    if offset.replace(*c).is_some() {
                        return Err(Error::invalid("at most one crop distortion per spec"));
                    }
                }
                other => rest.push(other.clone()),
            }
        }
        let rest = if rest.len() == 1 {
            rest.pop().unwrap()
        } else {
            DistortionSpec::Compose(rest)
        };
        Ok((offset.unwrap_or(0), rest))
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistortionSpec::Compose(children) if children.is_empty() => f.write_str("none"),
            DistortionSpec::Compose(children) => {
                let parts: Vec<String> = children.iter().map(|c| c.to_string()).collect();
                f.write_str(&parts.join("+"))
            }
            leaf => write!(f, "{}:{}", leaf.kind().unwrap(), leaf.intensity().unwrap()),
        }
    }
}

impl FromStr for DistortionSpec {
    type Err = Error;

    /// `kind:value`, joined with `+` for composition; `none` is the identity.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(DistortionSpec::identity());
        }
        let mut parts = Vec::new();
        for part in s.split('+') {
            let (kind, value) = part
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("expected kind:value, got {part:?}")))?;
            let kind: DistortionKind = kind.parse()?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad {} parameter {value:?}", kind.name())))?;
            parts.push(kind.with_intensity(value)?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            DistortionSpec::Compose(parts)
        })
    }
}

impl serde::Serialize for DistortionKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for DistortionKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl serde::Serialize for DistortionSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for DistortionSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Gradient of the training loss with respect to each input image.
pub trait LossGradient {
    fn loss_gradients(&self, images: &[Image], labels: &[usize]) -> Result<Vec<Image>>;
}

/// Inputs some distortions need besides the image and the stream.
#[derive(Default, Clone, Copy)]
pub struct DistortContext<'a> {
    /// Per-channel rotation fill; mid-gray when absent.
    pub fill: Option<&'a [f32]>,
    pub gradient: Option<&'a dyn LossGradient>,
    /// Output side for offset crops.
    pub crop_side: Option<usize>,
}

fn check_gaussian(sigma: f64) -> Result<()> {
    DistortionSpec::Gaussian { sigma }.validate()
}

/// Noisy copy before clipping. Draws one normal variate per value.
pub fn gaussian_noise_unclipped(img: &Image, sigma: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    check_gaussian(sigma)?;
    Ok(img
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v as f64 + sigma * z
        })
        .collect())
}

pub fn gaussian_noise(img: &Image, sigma: f64, rng: &mut RngStream) -> Result<Image> {
    check_gaussian(sigma)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let data = gaussian_noise_unclipped(img, sigma, rng)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(img.height(), img.width(), img.channels(), data)
}

fn resample(img: &Image, taps: &Taps, fill: &[f32]) -> Result<Image> {
    let planes: Vec<Vec<f32>> = img
        .to_planes()
        .iter()
        .zip(fill)
        .map(|(plane, &f)| {
            let mut dst = vec![0.0; taps.out_h * taps.out_w];
            taps.apply_plane(plane, f, &mut dst);
            dst
        })
        .collect();
    Image::from_planes(taps.out_h, taps.out_w, &planes)
}

pub fn thumbnail_resize(img: &Image, side: u32, mode: ThumbnailMode) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let a = side as usize;
    if a == 0 || a > h.min(w) {
        return Err(Error::invalid(format!(
            "thumbnail side must be in [1, {}], got {side}",
            h.min(w)
        )));
    }
    let fill = vec![0.0; img.channels()];
    match mode {
        ThumbnailMode::CropResize => {
            let center = img.crop((h - a) / 2, (w - a) / 2, a, a)?;
            resample(&center, &Taps::resize(a, a, h, w), &fill)
        }
        ThumbnailMode::Downsample => {
            let small = resample(img, &Taps::resize(h, w, a, a), &fill)?;
            resample(&small, &Taps::resize(a, a, h, w), &fill)
        }
    }
}

/// Rotation by a fixed angle (degrees, counter-clockwise) about the center.
pub fn rotate_by(img: &Image, degrees: f64, fill: &[f32]) -> Result<Image> {
    if fill.len() != img.channels() {
        return Err(Error::invalid(format!(
            "rotation fill has {} channels, image has {}",
            fill.len(),
            img.channels()
        )));
    }
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    resample(img, &Taps::rotation(img.height(), img.width(), degrees), fill)
}

/// Rotation by an angle drawn uniformly from `[-max_degrees, max_degrees]`.
pub fn rotate(img: &Image, max_degrees: f64, rng: &mut RngStream, fill: &[f32]) -> Result<Image> {
    DistortionSpec::Rotation { max_degrees }.validate()?;
    if max_degrees == 0.0 {
        return Ok(img.clone());
    }
    let angle = max_degrees * (2.0 * rng.uniform() - 1.0);
    rotate_by(img, angle, fill)
}

fn uniform_offset(c: u32, rng: &mut RngStream) -> i64 {
    let span = 2 * c as u64 + 1;
    let k = ((rng.uniform() * span as f64) as u64).min(span - 1);
    k as i64 - c as i64
}

/// Offset of the top-left corner of a centered `crop_side` window.
fn centered_origin(full: usize, crop_side: usize) -> usize {
    (full - crop_side) / 2
}

/// `crop_side` square whose center is displaced from the source center by
/// integers `(dy, dx)` drawn uniformly from `[-offset, offset]`, `dy` first.
pub fn offset_crop(full: &Image, offset: u32, crop_side: usize, rng: &mut RngStream) -> Result<Image> {
    let (h, w) = (full.height(), full.width());
    if crop_side == 0 || crop_side > h.min(w) {
        return Err(Error::invalid(format!("crop side {crop_side} does not fit a {h}x{w} image")));
    }
    let c = offset as usize;
    let (top0, left0) = (centered_origin(h, crop_side), centered_origin(w, crop_side));
    if c > top0 || c > left0 || top0 + c + crop_side > h || left0 + c + crop_side > w {
        return Err(Error::invalid(format!(
            "crop offset {offset} moves a {crop_side}-pixel window outside the {h}x{w} source"
        )));
    }
    if offset == 0 {
        return full.crop(top0, left0, crop_side, crop_side);
    }
    let dy = uniform_offset(offset, rng);
    let dx = uniform_offset(offset, rng);
    full.crop(
        (top0 as i64 + dy) as usize,
        (left0 as i64 + dx) as usize,
        crop_side,
        crop_side,
    )
}

/// `clip(x + epsilon * sign(g))` with `sign(0) = 0`.
pub fn fgsm_step(img: &Image, grad: &Image, epsilon: f64) -> Result<Image> {
    if !img.same_dims(grad) {
        return Err(Error::invalid("fgsm gradient does not match the image dimensions"));
    }
    if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "fgsm input gradient has value {} at index {i}",
            grad.data()[i]
        )));
    }
    let eps = epsilon as f32;
    let data = img
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (x + eps * s).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(img.height(), img.width(), img.channels(), data)
}

pub fn fgsm_batch(
    images: &[Image],
    labels: &[usize],
    model: &dyn LossGradient,
    epsilon: f64,
) -> Result<Vec<Image>> {
    DistortionSpec::Fgsm { epsilon }.validate()?;
    if images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "fgsm got {} images and {} labels",
            images.len(),
            labels.len()
        )));
    }
    if epsilon == 0.0 {
        return Ok(images.to_vec());
    }
    let grads = model.loss_gradients(images, labels)?;
    images
        .iter()
        .zip(&grads)
        .map(|(x, g)| fgsm_step(x, g, epsilon))
        .collect()
}

pub fn fgsm(img: &Image, label: usize, model: &dyn LossGradient, epsilon: f64) -> Result<Image> {
    Ok(fgsm_batch(std::slice::from_ref(img), &[label], model, epsilon)?.remove(0))
}

/// Applies `spec` to every image; sample `i` draws only from `rngs[i]`.
/// FGSM components query the context gradient once per component.
pub fn apply_batch(
    spec: &DistortionSpec,
    images: &[Image],
    labels: &[usize],
    rngs: &mut [RngStream],
    ctx: &DistortContext<'_>,
) -> Result<Vec<Image>> {
    if rngs.len() != images.len() {
        return Err(Error::invalid(format!(
            "{} images but {} random streams",
            images.len(),
            rngs.len()
        )));
    }
    spec.validate()?;
    if spec.needs_model() && ctx.gradient.is_none() {
        return Err(Error::invalid("fgsm distortion requires a model gradient context"));
    }
    let mut out = images.to_vec();
    for leaf in spec.leaves() {
        out = match *leaf {
            DistortionSpec::Fgsm { epsilon } => fgsm_batch(&out, labels, ctx.gradient.unwrap(), epsilon)?,
            _ => out
                .iter()
                .zip(rngs.iter_mut())
                .map(|(img, rng)| apply_leaf(leaf, img, rng, ctx))
                .collect::<Result<_>>()?,
        };
    }
    Ok(out)
}

pub fn apply(
    spec: &DistortionSpec,
    img: &Image,
    label: usize,
    rng: &mut RngStream,
    ctx: &DistortContext<'_>,
) -> Result<Image> {
    let mut rngs = [rng.clone()];
    let out = apply_batch(spec, std::slice::from_ref(img), &[label], &mut rngs, ctx)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().unwrap())
}

fn apply_leaf(spec: &DistortionSpec, img: &Image, rng: &mut RngStream, ctx: &DistortContext<'_>) -> Result<Image> {
    match *spec {
        DistortionSpec::Gaussian { sigma } => gaussian_noise(img, sigma, rng),
        DistortionSpec::Jpeg { quality } => jpeg_compress(img, quality),
        DistortionSpec::Thumbnail { side, mode } => thumbnail_resize(img, side, mode),
        DistortionSpec::Rotation { max_degrees } => {
            let gray = vec![0.5; img.channels()];
            rotate(img, max_degrees, rng, ctx.fill.unwrap_or(&gray))
        }
        DistortionSpec::Crop { offset } => {
            let side = ctx
                .crop_side
                .ok_or_else(|| Error::invalid("crop distortion requires an output side"))?;
            offset_crop(img, offset, side, rng)
        }
        DistortionSpec::Fgsm { .. } | DistortionSpec::Compose(_) => unreachable!("handled by apply_batch"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let n = h * w * c;
        Image::new(h, w, c, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["gaussian:0.05", "jpeg:30", "thumbnail:21", "thumbnail_down:7", "fgsm:0.001", "rotation:30", "crop:1"] {
            let spec: DistortionSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        let c: DistortionSpec = "gaussian:0.1+rotation:20".parse().unwrap();
        assert_eq!(c.leaves().len(), 2);
        assert_eq!(c.to_string(), "gaussian:0.1+rotation:20");
        assert_eq!("none".parse::<DistortionSpec>().unwrap(), DistortionSpec::identity());
        assert!("jpeg:0".parse::<DistortionSpec>().is_err());
        assert!("rotation:181".parse::<DistortionSpec>().is_err());
        assert!("gaussian:-0.1".parse::<DistortionSpec>().is_err());
        assert!("blur:1".parse::<DistortionSpec>().is_err());
    }

    #[test]
    fn integer_kinds_round() {
        let s = DistortionKind::Jpeg.with_intensity(29.6).unwrap();
        assert_eq!(s, DistortionSpec::Jpeg { quality: 30 });
    }

    #[test]
    fn identity_levels_are_identity() {
        let img = ramp(9, 9, 3);
        let mut rng = RngStream::new(1);
        let ctx = DistortContext::default();
        assert_eq!(gaussian_noise(&img, 0.0, &mut rng).unwrap(), img);
        assert_eq!(rotate(&img, 0.0, &mut rng, &[0.5; 3]).unwrap(), img);
        assert_eq!(thumbnail_resize(&img, 9, ThumbnailMode::CropResize).unwrap(), img);
        let id = DistortionSpec::Compose(vec![
            DistortionSpec::Gaussian { sigma: 0.0 },
            DistortionSpec::Rotation { max_degrees: 0.0 },
        ]);
        assert_eq!(apply(&id, &img, 0, &mut rng, &ctx).unwrap(), img);
        assert_eq!(apply(&DistortionSpec::identity(), &img, 0, &mut rng, &ctx).unwrap(), img);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = ramp(12, 12, 3);
        let mut rng = RngStream::new(4);
        let ctx = DistortContext {
            crop_side: Some(8),
            ..Default::default()
        };
        for s in ["gaussian:0.5", "jpeg:5", "thumbnail:5", "rotation:45", "crop:2", "gaussian:0.3+rotation:90"] {
            let spec: DistortionSpec = s.parse().unwrap();
            let out = apply(&spec, &img, 0, &mut rng, &ctx).unwrap();
            assert!(out.in_unit_range(), "{s}");
        }
    }

    #[test]
    fn fgsm_without_context_is_rejected() {
        let img = ramp(4, 4, 1);
        let spec = DistortionSpec::Fgsm { epsilon: 0.1 };
        let err = apply(&spec, &img, 0, &mut RngStream::new(0), &DistortContext::default());
        assert!(err.is_err());
    }

    #[test]
    fn fgsm_step_rejects_nan_gradient() {
        let img = ramp(2, 2, 1);
        let g = Image::new(2, 2, 1, vec![0.0, f32::NAN, 1.0, -1.0]).unwrap();
        assert!(matches!(fgsm_step(&img, &g, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn offset_crop_bounds() {
        let img = ramp(10, 10, 1);
        let mut rng = RngStream::new(0);
        assert!(offset_crop(&img, 1, 8, &mut rng).is_ok());
        assert!(offset_crop(&img, 2, 8, &mut rng).is_err());
        assert_eq!(offset_crop(&img, 0, 8, &mut rng).unwrap(), img.crop(1, 1, 8, 8).unwrap());
    }

    #[test]
    fn split_crop_separates_displacement() {
        let spec: DistortionSpec = "gaussian:0.1+crop:2".parse().unwrap();
        let (c, rest) = spec.split_crop().unwrap();
        assert_eq!(c, 2);
        assert_eq!(rest, DistortionSpec::Gaussian { sigma: 0.1 });
        let (c, rest) = "jpeg:10".parse::<DistortionSpec>().unwrap().split_crop().unwrap();
        assert_eq!((c, rest), (0, DistortionSpec::Jpeg { quality: 10 }));
    }
}
