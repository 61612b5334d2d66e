//! CSV, SVG and text renderings of a curve set. Output depends only on the
//! curve set, so regenerating a report reproduces it byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::curves::{envelope, select_best_worst, Envelope, RobustnessCurve};
use super::experiment::{CurveRecord, CurveSet, ResolvedSweep, BASELINE_ID};
use crate::error::{Error, Result};
use crate::train::Method;

pub const CSV_HEADER: [&str; 7] = [
    "run_id",
    "method",
    "train_distortion",
    "hyperparams",
    "test_distortion",
    "intensity",
    "accuracy",
];

/// Methods drawn as best/worst pairs, in legend order.
const COMPARED: [Method; 4] = [Method::Stability, Method::StabilitySym, Method::Augment, Method::Adversarial];

fn short(m: Method) -> &'static str {
    match m {
        Method::Baseline => "baseline",
        Method::Stability => "ST",
        Method::StabilitySym => "ST-sym",
        Method::Augment => "DA",
        Method::Adversarial => "AT",
    }
}

fn colour(m: Method) -> &'static str {
    match m {
        Method::Baseline => "#000000",
        Method::Stability => "#1f77b4",
        Method::StabilitySym => "#2ca02c",
        Method::Augment => "#d62728",
        Method::Adversarial => "#9467bd",
    }
}

/// Training distortion kinds joined by `+`, e.g. `gaussian+rotation`.
pub fn train_group(r: &CurveRecord) -> String {
    let kinds: Vec<String> = r
        .train_distortion
        .leaves()
        .iter()
        .filter_map(|l| l.kind().map(|k| k.to_string()))
        .collect();
    if kinds.is_empty() {
        "none".into()
    } else {
        kinds.join("+")
    }
}

pub fn write_csv(set: &CurveSet, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in &set.curves {
        for &(x, acc) in &r.curve.points {
            w.write_record([
                r.curve.run_id.as_str(),
                r.method.name(),
                &r.train_distortion.to_string(),
                &r.hyperparams,
                r.curve.test_distortion.name(),
                &x.to_string(),
                &acc.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The curves of one `train -> test` panel.
pub struct Panel<'a> {
    pub group: String,
    pub sweep: &'a ResolvedSweep,
    pub baseline: Option<&'a RobustnessCurve>,
    pub by_method: Vec<(Method, Vec<&'a RobustnessCurve>)>,
}

impl Panel<'_> {
    pub fn file_stem(&self) -> String {
        format!("{}_to_{}", self.group, self.sweep.distortion)
    }

    fn envelope(&self, m: Method) -> Option<Envelope> {
        let curves = &self.by_method.iter().find(|(k, _)| *k == m)?.1;
        envelope(curves).ok()
    }
}

pub fn panels(set: &CurveSet) -> Vec<Panel<'_>> {
    let mut groups: Vec<String> = Vec::new();
    for r in set.curves.iter().filter(|r| r.method != Method::Baseline) {
        let g = train_group(r);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let mut out = Vec::new();
    for g in &groups {
        for sweep in &set.tests {
            let of_test = |r: &&CurveRecord| r.curve.test_distortion == sweep.distortion;
            let baseline = set
                .curves
                .iter()
                .filter(of_test)
                .find(|r| r.method == Method::Baseline)
                .map(|r| &r.curve);
            let by_method = COMPARED
                .iter()
                .map(|&m| {
                    let curves: Vec<&RobustnessCurve> = set
                        .curves
                        .iter()
                        .filter(of_test)
                        .filter(|r| r.method == m && &train_group(r) == g)
                        .map(|r| &r.curve)
                        .collect();
                    (m, curves)
                })
                .filter(|(_, c)| !c.is_empty())
                .collect();
            out.push(Panel {
                group: g.clone(),
                sweep,
                baseline,
                by_method,
            });
        }
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maps intensities to `[0, 1]` along the sweep, weakest on the left.
struct XAxis {
    first: f64,
    last: f64,
    log: bool,
    zero_at: f64,
}

impl XAxis {
    fn new(sweep: &ResolvedSweep) -> Self {
        let xs = &sweep.intensities;
        let positive: Vec<f64> = xs.iter().copied().filter(|&x| x > 0.0).collect();
        let log = sweep.log_x && positive.len() >= 2;
        let f = |x: f64| if log { x.log10() } else { x };
        let (lo, hi) = positive
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(f(x)), b.max(f(x))));
        // Zero sits half a decade below the smallest positive intensity.
        let zero_at = if log { lo - 0.5 * ((hi - lo) / (positive.len() - 1) as f64).max(0.5) } else { 0.0 };
        let mut axis = XAxis {
            first: 0.0,
            last: 1.0,
            log,
            zero_at,
        };
        axis.first = axis.f(xs[0]);
        axis.last = axis.f(*xs.last().unwrap());
        if axis.first == axis.last {
            axis.last = axis.first + 1.0;
        }
        axis
    }

    fn f(&self, x: f64) -> f64 {
        match (self.log, x > 0.0) {
            (true, true) => x.log10(),
            (true, false) => self.zero_at,
            (false, _) => x,
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (self.f(x) - self.first) / (self.last - self.first) * (W - LEFT - RIGHT)
    }
}

fn py(acc: f64) -> f64 {
    TOP + (1.0 - acc) * (H - TOP - BOTTOM)
}

fn polyline(svg: &mut String, axis: &XAxis, points: &[(f64, f64)], stroke: &str, dash: Option<&str>) {
    let pts: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", axis.px(x), py(y)))
        .collect();
    let dash = dash.map(|d| format!(" stroke-dasharray=\"{d}\"")).unwrap_or_default();
    let _ = writeln!(
        svg,
        "  <polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"2\"{dash} points=\"{}\"/>",
        pts.join(" ")
    );
}

fn label(x: f64) -> String {
    super::grid::compact(x)
}

pub fn render_svg(panel: &Panel<'_>) -> String {
    let sweep = panel.sweep;
    let axis = XAxis::new(sweep);
    let mut svg = String::new();
    let _ = writeln!(svg, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "  <rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"#ffffff\"/>");
    let title = format!("{} \u{2192} {}", panel.group, sweep.distortion);
    let _ = writeln!(
        svg,
        "  <text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        (W - RIGHT + LEFT) / 2.0,
        escape(&title)
    );

    // Frame, gridlines and ticks.
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, py(0.0), py(1.0));
    for i in 0..=4 {
        let acc = i as f64 / 4.0;
        let y = py(acc);
        let _ = writeln!(
            svg,
            "  <line x1=\"{x0:.2}\" y1=\"{y:.2}\" x2=\"{x1:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>"
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{acc:.2}</text>",
            x0 - 6.0,
            y + 4.0
        );
    }
    let mut last_label = f64::NEG_INFINITY;
    for &x in &sweep.intensities {
        let px = axis.px(x);
        let _ = writeln!(
            svg,
            "  <line x1=\"{px:.2}\" y1=\"{y0:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"#000000\"/>",
            y0 + 4.0
        );
        if (px - last_label).abs() < 36.0 {
            continue;
        }
        last_label = px;
        let _ = writeln!(
            svg,
            "  <text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            y0 + 18.0,
            label(x)
        );
    }
    let _ = writeln!(
        svg,
        "  <rect x=\"{x0:.2}\" y=\"{y1:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#000000\"/>",
        x1 - x0,
        y0 - y1
    );
    let scale = if axis.log { " (log scale)" } else { "" };
    let _ = writeln!(
        svg,
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{} intensity{scale}</text>",
        (x0 + x1) / 2.0,
        H - 14.0,
        sweep.distortion
    );
    let _ = writeln!(
        svg,
        "  <text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">top-1 accuracy</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    // Envelope bands under the lines.
    for &(m, _) in &panel.by_method {
        if !m.is_stability() {
            continue;
        }
        if let Some(env) = panel.envelope(m) {
            let upper = env.intensities.iter().zip(&env.max);
            let lower = env.intensities.iter().zip(&env.min).rev();
            let pts: Vec<String> = upper
                .chain(lower)
                .map(|(&x, &y)| format!("{:.2},{:.2}", axis.px(x), py(y)))
                .collect();
            let _ = writeln!(
                svg,
                "  <polygon fill=\"{}\" fill-opacity=\"0.18\" stroke=\"none\" points=\"{}\"/>",
                colour(m),
                pts.join(" ")
            );
        }
    }

    // Practical level.
    let px = axis.px(sweep.practical);
    let _ = writeln!(
        svg,
        "  <line x1=\"{px:.2}\" y1=\"{y0:.2}\" x2=\"{px:.2}\" y2=\"{y1:.2}\" stroke=\"#888888\" stroke-dasharray=\"2 3\"/>"
    );

    let mut legend: Vec<(String, &str, Option<&str>)> = Vec::new();
    if let Some(b) = panel.baseline {
        polyline(&mut svg, &axis, &b.points, colour(Method::Baseline), None);
        legend.push(("baseline".into(), colour(Method::Baseline), None));
    }
    for (m, curves) in &panel.by_method {
        let Ok((best, worst)) = select_best_worst(curves, sweep.practical) else {
            continue;
        };
        for (id, role, dash) in [(best, "best", None), (worst, "worst", Some("6 4"))] {
            if let Some(c) = curves.iter().find(|c| c.run_id == id) {
                polyline(&mut svg, &axis, &c.points, colour(*m), dash);
                legend.push((format!("{} {role}", short(*m)), colour(*m), dash));
            }
        }
    }
    let lx = W - RIGHT + 14.0;
    for (i, (text, stroke, dash)) in legend.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let dash = dash.map(|d| format!(" stroke-dasharray=\"{d}\"")).unwrap_or_default();
        let _ = writeln!(
            svg,
            "  <line x1=\"{lx:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{stroke}\" stroke-width=\"2\"{dash}/>",
            lx + 24.0
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            lx + 30.0,
            y + 4.0,
            escape(text)
        );
    }
    let y = TOP + 10.0 + 18.0 * legend.len() as f64;
    let _ = writeln!(
        svg,
        "  <text x=\"{lx:.2}\" y=\"{:.2}\" fill=\"#555555\">practical: {}</text>",
        y + 4.0,
        label(sweep.practical)
    );
    svg.push_str("</svg>\n");
    svg
}

pub fn render_summary(set: &CurveSet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment {} (evaluation seed {})", set.experiment, set.seed);
    for panel in panels(set) {
        let sweep = panel.sweep;
        let id = sweep.intensities[0];
        let pr = sweep.practical;
        let _ = writeln!(
            out,
            "\n{} -> {}  (identity {}, practical {})",
            panel.group,
            sweep.distortion,
            label(id),
            label(pr)
        );
        let _ = writeln!(out, "{:<16} {:<48} {:>9} {:>9}", "model", "run", "identity", "practical");
        let row = |out: &mut String, role: &str, c: &RobustnessCurve| {
            let at = |x| c.accuracy_at(x).map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(out, "{role:<16} {:<48} {:>9} {:>9}", c.run_id, at(id), at(pr));
        };
        if let Some(b) = panel.baseline {
            row(&mut out, BASELINE_ID, b);
        }
        for (m, curves) in &panel.by_method {
            if let Ok((best, worst)) = select_best_worst(curves, pr) {
                for (r, role) in [(best, "best"), (worst, "worst")] {
                    if let Some(c) = curves.iter().find(|c| c.run_id == r) {
                        row(&mut out, &format!("{} {role}", short(*m)), c);
                    }
                }
            }
            if m.is_stability() {
                if let Some(env) = panel.envelope(*m) {
                    let w = |x| env.width_at(x).map_or("-".to_string(), |v| format!("{v:.4}"));
                    let _ = writeln!(
                        out,
                        "{:<16} {:<48} {:>9} {:>9}",
                        format!("{} envelope", short(*m)),
                        format!("width over {} runs", curves.len()),
                        w(id),
                        w(pr)
                    );
                }
            }
        }
    }
    out
}

/// Writes `curves.csv`, one SVG per panel and `summary.txt` into `dir`.
pub fn write_report(set: &CurveSet, dir: &Path) -> Result<Vec<PathBuf>> {
    if !set.curves.iter().any(|r| r.curve.run_id != BASELINE_ID) {
        return Err(Error::Config("no runs in the experiment; nothing to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv_path = dir.join("curves.csv");
    write_csv(set, &csv_path)?;
    written.push(csv_path);
    for panel in panels(set) {
        let path = dir.join(format!("{}.svg", panel.file_stem()));
        std::fs::write(&path, render_svg(&panel)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = dir.join("summary.txt");
    std::fs::write(&path, render_summary(set)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
