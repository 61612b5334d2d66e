use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

/// One hyperparameter range `[start, end, points]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub start: f64,
    pub end: f64,
    pub points: usize,
    #[serde(default)]
    pub scale: Scale,
}

impl Axis {
    pub fn new(name: &str, start: f64, end: f64, points: usize, scale: Scale) -> Self {
        Axis {
            name: name.to_string(),
            start,
            end,
            points,
            scale,
        }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        grid_points(self.start, self.end, self.points, self.scale)
            .map_err(|e| Error::Config(format!("axis {}: {e}", self.name)))
    }
}

/// Evenly spaced values from `start` to `end` inclusive, on a linear or
/// logarithmic scale. Both endpoints are reproduced exactly.
pub fn grid_points(start: f64, end: f64, n: usize, scale: Scale) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("a grid needs at least one point"));
    }
    if !start.is_finite() || !end.is_finite() {
        return Err(Error::invalid(format!("grid endpoints must be finite, got [{start}, {end}]")));
    }
    if scale == Scale::Log && (start <= 0.0 || end <= 0.0) {
        return Err(Error::invalid(format!(
            "log grid needs positive endpoints, got [{start}, {end}]"
        )));
    }
    if n == 1 {
        return Ok(vec![start]);
    }
    let last = (n - 1) as f64;
    let ratio = end / start;
    Ok((0..n)
        .map(|i| match i {
            0 => start,
            i if i == n - 1 => end,
            i => {
                let t = i as f64 / last;
                match scale {
                    Scale::Linear => start + (end - start) * t,
                    Scale::Log => start * ratio.powf(t),
                }
            }
        })
        .collect())
}

/// Cartesian product of named axes; the first axis varies slowest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.axes.iter().enumerate() {
            a.values()?;
            if self.axes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("axis {} appears twice", a.name)));
            }
        }
        Ok(())
    }

    /// Every grid point as one value per axis, in axis order.
    pub fn points(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut out = vec![Vec::new()];
        for axis in &self.axes {
            let values = axis.values()?;
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Short decimal rendering used in run identifiers: integers print without
/// a fraction, other values with four significant digits.
pub fn compact(v: f64) -> String {
    if v == v.round() && v.abs() < 1e12 {
        return format!("{}", v as i64);
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (3 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
