use serde::{Deserialize, Serialize};

use super::grid::{grid_points, Axis, Scale};
use crate::distortions::{DistortContext, DistortionKind, RngStream};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::ModelParams;
use crate::train::{accuracy, ModelGradient, PreparedSplit, TrainingData};

/// Test accuracy of one model against increasing intensities of one
/// distortion kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub run_id: String,
    pub test_distortion: DistortionKind,
    /// `(intensity, accuracy)` pairs in sweep order.
    pub points: Vec<(f64, f64)>,
}

impl RobustnessCurve {
    pub fn intensities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn accuracy_at(&self, intensity: f64) -> Option<f64> {
        self.points.iter().find(|p| same_level(p.0, intensity)).map(|p| p.1)
    }

    pub fn validate(&self) -> Result<()> {
        check_monotone(&self.intensities())?;
        if let Some(p) = self.points.iter().find(|p| !(0.0..=1.0).contains(&p.1)) {
            return Err(Error::invalid(format!("{}: accuracy {} outside [0, 1]", self.run_id, p.1)));
        }
        Ok(())
    }
}

fn same_level(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn check_monotone(xs: &[f64]) -> Result<()> {
    let up = xs.windows(2).all(|w| w[1] > w[0]);
    let down = xs.windows(2).all(|w| w[1] < w[0]);
    if xs.is_empty() || !(up || down) {
        return Err(Error::invalid(format!("intensities {xs:?} are not strictly monotone")));
    }
    Ok(())
}

/// Pointwise accuracy range over a set of curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub intensities: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Envelope {
    pub fn width_at(&self, intensity: f64) -> Option<f64> {
        let i = self.intensities.iter().position(|&x| same_level(x, intensity))?;
        Some(self.max[i] - self.min[i])
    }
}

pub fn envelope(curves: &[&RobustnessCurve]) -> Result<Envelope> {
    let first = curves.first().ok_or_else(|| Error::invalid("envelope of an empty curve set"))?;
    let intensities = first.intensities();
    let mut min: Vec<f64> = first.points.iter().map(|p| p.1).collect();
    let mut max = min.clone();
    for c in &curves[1..] {
        if c.points.len() != intensities.len() || c.points.iter().zip(&intensities).any(|(p, &x)| !same_level(p.0, x)) {
            return Err(Error::invalid(format!(
                "curve {} has a different intensity list than {}",
                c.run_id, first.run_id
            )));
        }
        for (i, p) in c.points.iter().enumerate() {
            min[i] = min[i].min(p.1);
            max[i] = max[i].max(p.1);
        }
    }
    Ok(Envelope { intensities, min, max })
}

/// `(best, worst)` run ids by accuracy at `practical`; ties go to the lower
/// run id.
pub fn select_best_worst(curves: &[&RobustnessCurve], practical: f64) -> Result<(String, String)> {
    if curves.is_empty() {
        return Err(Error::invalid("best/worst selection over an empty curve set"));
    }
    let mut scored = Vec::with_capacity(curves.len());
    for c in curves {
        let acc = c.accuracy_at(practical).ok_or_else(|| {
            Error::invalid(format!("curve {} has no point at intensity {practical}", c.run_id))
        })?;
        scored.push((c.run_id.as_str(), acc));
    }
    scored.sort_by(|a, b| a.0.cmp(b.0));
    let mut best = scored[0];
    let mut worst = scored[0];
    for &s in &scored[1..] {
        if s.1 > best.1 {
            best = s;
        }
        if s.1 < worst.1 {
            worst = s;
        }
    }
    Ok((best.0.to_string(), worst.0.to_string()))
}

/// Scales a pixel measure given at 224-pixel crops to `crop`.
fn rescale(v: f64, crop: usize) -> f64 {
    (v * crop as f64 / 224.0).round()
}

/// The training range of each distortion kind, with pixel-valued ranges
/// rescaled to the crop side.
pub fn default_range(kind: DistortionKind, crop: usize) -> Axis {
    let name = kind.name();
    let side = crop as f64;
    match kind {
        DistortionKind::Gaussian => Axis::new(name, 0.01, 1.0, 4, Scale::Log),
        DistortionKind::Jpeg => Axis::new(name, 90.0, 10.0, 3, Scale::Linear),
        DistortionKind::Thumbnail(_) => Axis::new(
            name,
            rescale(20.0, crop).clamp(1.0, side),
            rescale(200.0, crop).clamp(1.0, side),
            3,
            Scale::Linear,
        ),
        DistortionKind::Fgsm => Axis::new(name, 0.001, 1.0, 7, Scale::Log),
        DistortionKind::Rotation => Axis::new(name, 0.0, 180.0, 3, Scale::Linear),
        DistortionKind::Crop => Axis::new(name, 0.0, rescale(15.0, crop).max(1.0), 3, Scale::Linear),
    }
}

/// Practical intensity of each kind at the given crop side.
pub fn practical_level(kind: DistortionKind, crop: usize) -> f64 {
    match kind {
        DistortionKind::Gaussian => 0.05,
        DistortionKind::Jpeg => 30.0,
        DistortionKind::Thumbnail(_) => rescale(150.0, crop).clamp(1.0, crop as f64),
        DistortionKind::Fgsm => 0.001,
        DistortionKind::Rotation => 30.0,
        DistortionKind::Crop => rescale(3.0, crop).max(1.0),
    }
}

/// Sweep position standing for undistorted data. Quality 100 plays that
/// role for JPEG, which has no exact identity level.
pub fn identity_point(kind: DistortionKind, crop: usize) -> f64 {
    kind.identity_level(crop).unwrap_or(100.0)
}

/// One test distortion of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSweep {
    pub distortion: DistortionKind,
    /// Explicit intensities; the training range when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub practical: Option<f64>,
    #[serde(default)]
    pub log_x: bool,
}

impl TestSweep {
    pub fn new(distortion: DistortionKind) -> Self {
        TestSweep {
            distortion,
            intensities: None,
            practical: None,
            log_x: false,
        }
    }

    pub fn practical(&self, crop: usize) -> f64 {
        self.practical.unwrap_or_else(|| practical_level(self.distortion, crop))
    }

    /// Identity point, sweep values and practical level, ordered from
    /// weakest to strongest and deduplicated.
    pub fn resolve(&self, crop: usize) -> Result<Vec<f64>> {
        let kind = self.distortion;
        let mut values = match &self.intensities {
            Some(v) => v.clone(),
            None => {
                let a = default_range(kind, crop);
                grid_points(a.start, a.end, a.points, a.scale)?
            }
        };
        values.push(identity_point(kind, crop));
        values.push(self.practical(crop));
        for &v in &values {
            kind.with_intensity(v).map_err(|e| Error::Config(format!("test sweep: {e}")))?;
        }
        if kind.is_integer() {
            for v in values.iter_mut() {
                *v = v.round();
            }
        }
        values.sort_by(|a, b| a.total_cmp(b));
        values.dedup_by(|a, b| same_level(*a, *b));
        if kind.decreasing() {
            values.reverse();
        }
        Ok(values)
    }
}

/// Evaluates `model` on `test` at each intensity. Distorted test sets are
/// drawn from `seed` alone, so every model sees the same images; the
/// identity point uses the undistorted split.
pub fn evaluate_curve(
    run_id: &str,
    model: &ModelParams<f32>,
    kind: DistortionKind,
    intensities: &[f64],
    test: &PreparedSplit,
    data: &TrainingData,
    seed: u64,
) -> Result<RobustnessCurve> {
    check_monotone(intensities)?;
    let crop = data.pipeline.crop;
    let root = RngStream::new(seed).split(kind_stream(kind));
    let fill = data.stats.fill();
    let grad = ModelGradient {
        model,
        stats: &data.stats,
    };
    let ctx = DistortContext {
        fill: Some(&fill),
        gradient: Some(&grad),
        crop_side: Some(crop),
    };
    let mut points = Vec::with_capacity(intensities.len());
    for &level in intensities {
        let acc = if same_level(level, identity_point(kind, crop)) {
            accuracy(model, &test.clean, &test.labels, &data.stats, EVAL_BATCH)?
        } else {
            let spec = kind.with_intensity(level)?;
            let mut distorted: Vec<Image> = Vec::with_capacity(test.len());
            for start in (0..test.len()).step_by(EVAL_BATCH) {
                let end = (start + EVAL_BATCH).min(test.len());
                let sources: Vec<&Image> = test.sources[start..end].iter().collect();
                let mut rngs: Vec<RngStream> = (start..end).map(|i| root.split(i as u64)).collect();
                let labels = &test.labels[start..end];
                distorted.extend(data.pipeline.distort_batch(&sources, labels, &spec, &mut rngs, &ctx)?);
            }
            accuracy(model, &distorted, &test.labels, &data.stats, EVAL_BATCH)?
        };
        points.push((level, acc));
    }
    Ok(RobustnessCurve {
        run_id: run_id.to_string(),
        test_distortion: kind,
        points,
    })
}

const EVAL_BATCH: usize = 100;

fn kind_stream(kind: DistortionKind) -> u64 {
    DistortionKind::ALL.iter().position(|&k| k == kind).unwrap_or(DistortionKind::ALL.len()) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(id: &str, acc: &[f64]) -> RobustnessCurve {
        RobustnessCurve {
            run_id: id.into(),
            test_distortion: DistortionKind::Gaussian,
            points: acc.iter().enumerate().map(|(i, &a)| (i as f64 * 0.1, a)).collect(),
        }
    }

    #[test]
    fn envelope_pointwise() {
        let (a, b) = (curve("a", &[0.5, 0.5]), curve("b", &[0.3, 0.7]));
        let e = envelope(&[&a, &b]).unwrap();
        assert_eq!((e.min.clone(), e.max.clone()), (vec![0.3, 0.5], vec![0.5, 0.7]));
        assert_eq!(envelope(&[&b, &a]).unwrap(), e);
        let one = envelope(&[&a]).unwrap();
        assert_eq!(one.min, one.max);
        let short = curve("c", &[0.1]);
        assert!(envelope(&[&a, &short]).is_err());
        assert!(envelope(&[]).is_err());
    }

    #[test]
    fn best_worst_and_ties() {
        let (a, b) = (curve("001", &[0.9, 0.6]), curve("002", &[0.1, 0.4]));
        assert_eq!(select_best_worst(&[&a, &b], 0.1).unwrap(), ("001".into(), "002".into()));
        let tie = curve("000", &[0.0, 0.6]);
        assert_eq!(select_best_worst(&[&a, &tie, &b], 0.1).unwrap().0, "000");
        assert_eq!(select_best_worst(&[&a], 0.1).unwrap(), ("001".into(), "001".into()));
        assert!(select_best_worst(&[&a], 0.35).is_err());
        assert!(select_best_worst(&[], 0.1).is_err());
    }

    #[test]
    fn sweeps_include_identity_and_practical() {
        let g = TestSweep::new(DistortionKind::Gaussian).resolve(32).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(g.contains(&0.05) && g.contains(&1.0) && g.len() == 6);
        let j = TestSweep::new(DistortionKind::Jpeg).resolve(32).unwrap();
        assert_eq!(j, vec![100.0, 90.0, 50.0, 30.0, 10.0]);
        let r = TestSweep::new(DistortionKind::Rotation).resolve(32).unwrap();
        assert_eq!(r, vec![0.0, 30.0, 90.0, 180.0]);
        let kind = DistortionKind::Thumbnail(crate::distortions::ThumbnailMode::CropResize);
        assert_eq!(TestSweep::new(kind).resolve(32).unwrap(), vec![32.0, 29.0, 21.0, 16.0, 3.0]);
        assert_eq!(practical_level(kind, 224), 150.0);
        assert_eq!(practical_level(DistortionKind::Crop, 224), 3.0);
    }
}
