use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curves::{evaluate_curve, RobustnessCurve, TestSweep};
use super::grid::{compact, GridSpec};
use crate::config::{GridConfig, Schedule};
use crate::distortions::{DistortionKind, DistortionSpec};
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ModelParams};
use crate::train::{load_model, Method, PreparedSplit, TrainConfig, Trainer, TrainingData};

pub const MANIFEST: &str = "manifest.toml";
pub const CURVES: &str = "curves.json";
pub const BASELINE_ID: &str = "baseline";

/// One resolved grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub id: String,
    pub config: TrainConfig,
}

fn distortion_label(spec: &DistortionSpec) -> String {
    if spec.is_identity() && spec.kind().is_none() {
        return "none".into();
    }
    spec.leaves()
        .iter()
        .map(|l| format!("{}={}", l.kind().expect("leaf"), compact(l.intensity().expect("leaf"))))
        .collect::<Vec<_>>()
        .join("+")
}

/// Expands every grid into runs, numbered in order across grids.
pub fn plan_runs(grids: &[GridConfig], schedule: &Schedule, seed: u64) -> Result<Vec<RunPlan>> {
    let mut plans = Vec::new();
    for g in grids {
        let own = g.method.hyperparameter().ok_or_else(|| {
            Error::Config(format!("method {} has no hyperparameter to grid over", g.method))
        })?;
        let mut own_axis = None;
        let mut kinds = Vec::with_capacity(g.axes.len());
        for (i, a) in g.axes.iter().enumerate() {
            if a.name == own {
                own_axis = Some(i);
                kinds.push(None);
            } else {
                let kind: DistortionKind = a.name.parse().map_err(|_| {
                    Error::Config(format!(
                        "{} grid axis {:?} is neither {own} nor a distortion kind",
                        g.method, a.name
                    ))
                })?;
                kinds.push(Some(kind));
            }
        }
        let own_axis = own_axis.ok_or_else(|| Error::Config(format!("{} grid needs an {own} axis", g.method)))?;
        let spec = GridSpec { axes: g.axes.clone() };
        for point in spec.points()? {
            let mut leaves = Vec::new();
            for (kind, &v) in kinds.iter().zip(&point) {
                if let Some(kind) = kind {
                    leaves.push(kind.with_intensity(v).map_err(|e| Error::Config(e.to_string()))?);
                }
            }
            leaves.extend(g.fixed.leaves().into_iter().cloned());
            let distortion = if leaves.len() == 1 {
                leaves.pop().unwrap()
            } else {
                DistortionSpec::Compose(leaves)
            };
            let mut cfg = TrainConfig::fine_tune(g.method, Some(point[own_axis]), distortion, seed);
            cfg.epochs = schedule.epochs;
            cfg.batch_size = schedule.batch_size;
            cfg.lr = schedule.lr;
            cfg.momentum = schedule.momentum;
            cfg.per_batch_draw = g.per_batch_draw;
            cfg.detach_reference = g.detach_reference;
            cfg.validate()?;
            let id = format!(
                "{:03}_{}_{own}={}_{}",
                plans.len(),
                g.method,
                compact(point[own_axis]),
                distortion_label(&cfg.distortion)
            );
            plans.push(RunPlan { id, config: cfg });
        }
    }
    Ok(plans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub id: String,
    pub method: Method,
    pub hyperparams: String,
    pub train_distortion: DistortionSpec,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunEntry {
    fn pending(plan: &RunPlan) -> Self {
        RunEntry {
            id: plan.id.clone(),
            method: plan.config.method,
            hyperparams: plan.config.hyperparams_label(),
            train_distortion: plan.config.distortion.clone(),
            status: RunStatus::Pending,
            selected_epoch: None,
            val_acc: None,
            error: None,
        }
    }
}

/// Persistent experiment state: identity, grids and per-run status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<RunEntry>,
    #[serde(default)]
    pub grid: Vec<GridConfig>,
    #[serde(default)]
    pub runs: Vec<RunEntry>,
}

impl Manifest {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Manifest {
            experiment: experiment.to_string(),
            seed,
            baseline: None,
            grid: Vec::new(),
            runs: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads the manifest of `dir` or starts a new one; an existing manifest
    /// must belong to the same experiment.
    pub fn open(dir: &Path, experiment: &str, seed: u64) -> Result<Self> {
        match Self::load(dir)? {
            Some(m) if m.experiment != experiment || m.seed != seed => Err(Error::Config(format!(
                "{} holds experiment {:?} with seed {}, not {experiment:?} with seed {seed}",
                dir.display(),
                m.experiment,
                m.seed
            ))),
            Some(m) => Ok(m),
            None => Ok(Self::new(experiment, seed)),
        }
    }

    /// Writes through a temporary file so readers never see a partial
    /// manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string(self).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        let path = dir.join(MANIFEST);
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn completed(&self) -> impl Iterator<Item = &RunEntry> {
        self.runs.iter().filter(|r| r.status == RunStatus::Done)
    }
}

pub fn baseline_dir(dir: &Path) -> PathBuf {
    dir.join(BASELINE_ID)
}

pub fn run_dir(dir: &Path, id: &str) -> PathBuf {
    dir.join("runs").join(id)
}

fn checkpoint_of(dir: &Path, id: &str) -> PathBuf {
    if id == BASELINE_ID {
        baseline_dir(dir).join("best.stbl")
    } else {
        run_dir(dir, id).join("best.stbl")
    }
}

#[derive(Debug, Default)]
pub struct GridOutcome {
    pub executed: usize,
    pub skipped: usize,
    pub failed: Vec<(String, Error)>,
}

/// Trainer inputs shared by every run of a grid.
pub struct GridContext<'a> {
    pub dir: &'a Path,
    pub data: &'a TrainingData,
    pub model_cfg: &'a ModelConfig,
    pub baseline: &'a ModelParams<f32>,
    pub jobs: usize,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))
}

/// Trains every planned run that has not completed yet. Failures are
/// recorded in the manifest and do not stop the other runs.
pub fn run_grid(ctx: &GridContext<'_>, manifest: &mut Manifest, plans: &[RunPlan]) -> Result<GridOutcome> {
    let mut entries = Vec::with_capacity(plans.len());
    let mut todo = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let prior = manifest.runs.iter().find(|r| r.id == plan.id);
        match prior {
            Some(r) if r.status == RunStatus::Done && checkpoint_of(ctx.dir, &r.id).is_file() => entries.push(r.clone()),
            _ => {
                entries.push(RunEntry::pending(plan));
                todo.push(i);
            }
        }
    }
    manifest.runs = entries;
    manifest.save(ctx.dir)?;
    let skipped = plans.len() - todo.len();

    let shared = Mutex::new((manifest, Vec::new()));
    pool(ctx.jobs)?.install(|| {
        todo.par_iter().for_each(|&i| {
            let plan = &plans[i];
            let out = run_dir(ctx.dir, &plan.id);
            let result = Trainer {
                cfg: &plan.config,
                data: ctx.data,
                model_cfg: ctx.model_cfg,
                init: Some(ctx.baseline),
                out_dir: Some(&out),
            }
            .run(None);
            let mut guard = shared.lock().expect("manifest lock");
            let (manifest, failed) = &mut *guard;
            let entry = &mut manifest.runs[i];
            match result {
                Ok(o) => {
                    entry.status = RunStatus::Done;
                    entry.selected_epoch = Some(o.record.selected_epoch);
                    entry.val_acc = Some(o.record.selected().val_acc);
                    entry.error = None;
                }
                Err(e) => {
                    entry.status = RunStatus::Failed;
                    entry.error = Some(e.to_string());
                    failed.push((plan.id.clone(), e));
                }
            }
            if let Err(e) = manifest.save(ctx.dir) {
                failed.push((plan.id.clone(), e));
            }
        })
    });
    let (_, mut failed) = shared.into_inner().expect("manifest lock");
    failed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(GridOutcome {
        executed: todo.len(),
        skipped,
        failed,
    })
}

/// A curve with the training metadata of its model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub method: Method,
    pub train_distortion: DistortionSpec,
    pub hyperparams: String,
    pub curve: RobustnessCurve,
}

/// A test sweep with its intensities fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSweep {
    pub distortion: DistortionKind,
    pub intensities: Vec<f64>,
    pub practical: f64,
    pub log_x: bool,
}

/// Everything a report is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub experiment: String,
    pub seed: u64,
    pub tests: Vec<ResolvedSweep>,
    pub curves: Vec<CurveRecord>,
}

impl CurveSet {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(CURVES);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Format {
                what: "curve file",
                offset: 0,
                detail: e.to_string(),
            })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CURVES);
        let text = serde_json::to_string_pretty(self).expect("curves serialize");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Test sweeps used when the configuration names none: every distortion
/// kind trained on, in grid order.
pub fn default_tests(manifest: &Manifest) -> Vec<TestSweep> {
    let mut kinds: Vec<DistortionKind> = Vec::new();
    for r in &manifest.runs {
        for leaf in r.train_distortion.leaves() {
            if let Some(k) = leaf.kind() {
                if !kinds.contains(&k) {
                    kinds.push(k);
                }
            }
        }
    }
    if kinds.is_empty() {
        kinds.push(DistortionKind::Gaussian);
    }
    kinds.into_iter().map(TestSweep::new).collect()
}

/// Evaluates the baseline and every completed run on every test sweep.
pub fn evaluate_experiment(
    dir: &Path,
    manifest: &Manifest,
    tests: &[TestSweep],
    data: &TrainingData,
    test: &PreparedSplit,
    seed: u64,
    jobs: usize,
) -> Result<CurveSet> {
    let baseline = manifest
        .baseline
        .as_ref()
        .filter(|b| b.status == RunStatus::Done)
        .ok_or_else(|| Error::Config("no baseline; run train-baseline first".into()))?;
    let runs: Vec<&RunEntry> = std::iter::once(baseline).chain(manifest.completed()).collect();
    if runs.len() == 1 {
        return Err(Error::Config("no runs to evaluate; run the grid first".into()));
    }
    let crop = data.pipeline.crop;
    let sweeps = tests
        .iter()
        .map(|t| {
            Ok(ResolvedSweep {
                distortion: t.distortion,
                intensities: t.resolve(crop)?,
                practical: t.practical(crop),
                log_x: t.log_x,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_run: Vec<Result<Vec<CurveRecord>>> = pool(jobs)?.install(|| {
        runs.par_iter()
            .map(|r| {
                let model = load_model(&checkpoint_of(dir, &r.id))?;
                sweeps
                    .iter()
                    .map(|s| {
                        let curve = evaluate_curve(&r.id, &model, s.distortion, &s.intensities, test, data, seed)?;
                        Ok(CurveRecord {
                            method: r.method,
                            train_distortion: r.train_distortion.clone(),
                            hyperparams: r.hyperparams.clone(),
                            curve,
                        })
                    })
                    .collect()
            })
            .collect()
    });
    let mut curves = Vec::new();
    for r in per_run {
        curves.extend(r?);
    }
    Ok(CurveSet {
        experiment: manifest.experiment.clone(),
        seed,
        tests: sweeps,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::grid::{Axis, Scale};

    fn st_grid() -> GridConfig {
        GridConfig {
            method: Method::Stability,
            axes: vec![
                Axis::new("alpha", 0.01, 10.0, 3, Scale::Log),
                Axis::new("gaussian", 0.01, 1.0, 4, Scale::Log),
            ],
            fixed: DistortionSpec::identity(),
            per_batch_draw: false,
            detach_reference: None,
        }
    }

    #[test]
    fn plans_cover_the_product() {
        let plans = plan_runs(&[st_grid()], &Schedule::fine_tune(), 3).unwrap();
        assert_eq!(plans.len(), 12);
        assert_eq!(plans[0].id, "000_stability_alpha=0.01_gaussian=0.01");
        assert_eq!(plans[5].id, "005_stability_alpha=0.3162_gaussian=0.04642");
        assert_eq!(plans[11].config.alpha, Some(10.0));
        assert!(plans.iter().all(|p| p.config.seed == 3 && p.config.epochs == 5));
    }

    #[test]
    fn fixed_distortions_compose_after_axes() {
        let mut g = st_grid();
        g.axes.truncate(1);
        g.axes.push(Axis::new("gaussian", 0.05, 0.05, 1, Scale::Linear));
        g.fixed = "rotation:30".parse().unwrap();
        let plans = plan_runs(&[g], &Schedule::fine_tune(), 0).unwrap();
        assert_eq!(plans.len(), 3);
        assert_eq!(plans[0].config.distortion.to_string(), "gaussian:0.05+rotation:30");
        assert!(plans[0].id.ends_with("gaussian=0.05+rotation=30"));
    }

    #[test]
    fn bad_axes_rejected() {
        let mut g = st_grid();
        g.axes[1].name = "blur".into();
        assert!(matches!(plan_runs(&[g], &Schedule::fine_tune(), 0), Err(Error::Config(_))));
        let mut g = st_grid();
        g.axes.remove(0);
        assert!(plan_runs(&[g], &Schedule::fine_tune(), 0).is_err());
    }

    #[test]
    fn manifest_round_trips_through_toml() {
        let plans = plan_runs(&[st_grid()], &Schedule::fine_tune(), 0).unwrap();
        let mut m = Manifest::new("gauss", 0);
        m.grid.push(st_grid());
        m.runs = plans.iter().map(RunEntry::pending).collect();
        m.runs[1].status = RunStatus::Done;
        m.runs[1].val_acc = Some(0.75);
        let text = toml::to_string(&m).unwrap();
        assert_eq!(toml::from_str::<Manifest>(&text).unwrap(), m);
    }
}
