use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stabletrain::config::{ExperimentConfig, ExperimentData, Overrides};
use stabletrain::distortions::{DistortContext, DistortionSpec, RngStream};
use stabletrain::harness::{
    self, baseline_dir, default_tests, evaluate_experiment, plan_runs, run_grid, CurveSet, GridContext, Manifest,
    RunEntry, RunStatus, BASELINE_ID,
};
use stabletrain::train::{load_model, Method, ModelGradient, TrainConfig, Trainer};
use stabletrain::{Category, Error, Result};

/// Stability training, augmentation and adversarial training experiments.
#[derive(Parser)]
#[command(name = "stabletrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to the configuration, then STABLETRAIN_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline model on undistorted data.
    TrainBaseline(Common),
    /// Fine-tune the baseline over every configured grid.
    Run {
        #[command(flatten)]
        common: Common,
        /// Print the resolved grid without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate the baseline and all completed runs on the test sweeps.
    Evaluate(Common),
    /// Write the CSV, SVG plots and summary from the evaluated curves.
    Report(Common),
    /// Dump clean and distorted test images as PNM files.
    Distort {
        #[command(flatten)]
        common: Common,
        /// Distortion, e.g. `gaussian:0.1` or `jpeg:30+rotation:15`.
        #[arg(long)]
        distortion: DistortionSpec,
        /// Number of test images.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

/// Grid finished with some, not all, runs failing.
const EXIT_PARTIAL: u8 = 5;

struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Session {
    fn open(c: &Common) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&c.config)?;
        cfg.apply(&Overrides {
            seed: c.seed,
            out: c.out.clone(),
            jobs: c.jobs,
        });
        cfg.validate()?;
        let out = cfg.out_dir()?;
        Ok(Session { cfg, out })
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::open(&self.out, &self.cfg.experiment.id, self.cfg.experiment.seed)
    }

    fn data(&self) -> Result<ExperimentData> {
        self.cfg.load_data()
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        Category::Config => 2,
        Category::Data => 3,
        Category::Numeric => 4,
    }
}

fn train_baseline(c: &Common) -> Result<u8> {
    let s = Session::open(c)?;
    let ed = s.data()?;
    let model_cfg = s.cfg.model_config(ed.data.classes, ed.channels());
    let sched = &s.cfg.baseline;
    let tc = TrainConfig {
        epochs: sched.epochs,
        batch_size: sched.batch_size,
        lr: sched.lr,
        momentum: sched.momentum,
        ..TrainConfig::baseline(s.cfg.experiment.seed)
    };
    let mut manifest = s.manifest()?;
    let dir = baseline_dir(&s.out);
    let outcome = Trainer {
        cfg: &tc,
        data: &ed.data,
        model_cfg: &model_cfg,
        init: None,
        out_dir: Some(&dir),
    }
    .run(None)?;
    let sel = outcome.record.selected();
    manifest.baseline = Some(RunEntry {
        id: BASELINE_ID.into(),
        method: Method::Baseline,
        hyperparams: String::new(),
        train_distortion: DistortionSpec::identity(),
        status: RunStatus::Done,
        selected_epoch: Some(sel.epoch),
        val_acc: Some(sel.val_acc),
        error: None,
    });
    manifest.save(&s.out)?;
    println!(
        "baseline: selected epoch {} of {}, validation accuracy {:.4}",
        sel.epoch, tc.epochs, sel.val_acc
    );
    println!("checkpoint: {}", dir.join("best.stbl").display());
    Ok(0)
}

fn run(c: &Common, dry_run: bool) -> Result<u8> {
    let s = Session::open(c)?;
    let plans = plan_runs(&s.cfg.grid, &s.cfg.fine_tune, s.cfg.experiment.seed)?;
    if dry_run {
        println!("{} grid points", plans.len());
        for p in &plans {
            println!("{}\t{}\t{}", p.id, p.config.hyperparams_label(), p.config.distortion);
        }
        return Ok(0);
    }
    if plans.is_empty() {
        return Err(Error::Config("no [[grid]] entries in the configuration".into()));
    }
    let ckpt = baseline_dir(&s.out).join("best.stbl");
    if !ckpt.is_file() {
        return Err(Error::Config(format!(
            "baseline checkpoint {} missing; run train-baseline first",
            ckpt.display()
        )));
    }
    let mut manifest = s.manifest()?;
    manifest.grid = s.cfg.grid.clone();
    let ed = s.data()?;
    let model_cfg = s.cfg.model_config(ed.data.classes, ed.channels());
    let baseline = load_model(&ckpt)?;
    let ctx = GridContext {
        dir: &s.out,
        data: &ed.data,
        model_cfg: &model_cfg,
        baseline: &baseline,
        jobs: s.cfg.jobs(),
    };
    let outcome = run_grid(&ctx, &mut manifest, &plans)?;
    println!("{} runs executed, {} already complete", outcome.executed, outcome.skipped);
    for (id, e) in &outcome.failed {
        eprintln!("run {id} failed: {e}");
    }
    Ok(match outcome.failed.first() {
        None => 0,
        Some((_, e)) if outcome.failed.len() == outcome.executed => exit_code(e),
        Some(_) => EXIT_PARTIAL,
    })
}

fn evaluate(c: &Common) -> Result<u8> {
    let s = Session::open(c)?;
    let manifest = Manifest::load(&s.out)?
        .ok_or_else(|| Error::Config(format!("no runs in {}", s.out.display())))?;
    let tests = if s.cfg.evaluation.tests.is_empty() {
        default_tests(&manifest)
    } else {
        s.cfg.evaluation.tests.clone()
    };
    let ed = s.data()?;
    let set = evaluate_experiment(
        &s.out,
        &manifest,
        &tests,
        &ed.data,
        &ed.test,
        s.cfg.evaluation_seed(),
        s.cfg.jobs(),
    )?;
    set.save(&s.out)?;
    println!(
        "{} curves over {} test distortions written to {}",
        set.curves.len(),
        set.tests.len(),
        s.out.join(harness::CURVES).display()
    );
    Ok(0)
}

fn report(c: &Common) -> Result<u8> {
    let s = Session::open(c)?;
    let no_runs = || Error::Config(format!("no runs in {}", s.out.display()));
    let manifest = Manifest::load(&s.out)?.ok_or_else(no_runs)?;
    if manifest.completed().next().is_none() {
        return Err(no_runs());
    }
    let set = CurveSet::load(&s.out)?
        .ok_or_else(|| Error::Config("no evaluated curves; run evaluate first".into()))?;
    for path in harness::write_report(&set, &s.out.join("report"))? {
        println!("{}", path.display());
    }
    Ok(0)
}

fn distort(c: &Common, spec: &DistortionSpec, count: usize) -> Result<u8> {
    let s = Session::open(c)?;
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let ed = s.data()?;
    let model = if spec.needs_model() {
        let ckpt = baseline_dir(&s.out).join("best.stbl");
        Some(load_model(&ckpt).map_err(|_| {
            Error::Config(format!("fgsm needs the baseline checkpoint {}", ckpt.display()))
        })?)
    } else {
        None
    };
    let n = count.min(ed.test.len());
    let fill = ed.data.stats.fill();
    let grad = model.as_ref().map(|m| ModelGradient {
        model: m,
        stats: &ed.data.stats,
    });
    let ctx = DistortContext {
        fill: Some(&fill),
        gradient: grad.as_ref().map(|g| g as _),
        crop_side: Some(ed.data.pipeline.crop),
    };
    let root = RngStream::new(s.cfg.experiment.seed);
    let sources: Vec<_> = ed.test.sources[..n].iter().collect();
    let mut rngs: Vec<RngStream> = (0..n).map(|i| root.split(i as u64)).collect();
    let distorted = ed
        .data
        .pipeline
        .distort_batch(&sources, &ed.test.labels[..n], spec, &mut rngs, &ctx)?;
    let dir = s.out.join("distort");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tag = spec.to_string().replace([':', '+'], "_");
    for (i, (clean, d)) in ed.test.clean[..n].iter().zip(&distorted).enumerate() {
        write(&dir, &format!("{i:03}_clean"), clean)?;
        write(&dir, &format!("{i:03}_{tag}"), d)?;
    }
    println!("{} image pairs written to {}", n, dir.display());
    Ok(0)
}

fn write(dir: &Path, stem: &str, img: &stabletrain::Image) -> Result<()> {
    let ext = if img.channels() == 1 { "pgm" } else { "ppm" };
    img.write_pnm(&dir.join(format!("{stem}.{ext}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainBaseline(c) => train_baseline(c),
        Command::Run { common, dry_run } => run(common, *dry_run),
        Command::Evaluate(c) => evaluate(c),
        Command::Report(c) => report(c),
        Command::Distort {
            common,
            distortion,
            count,
        } => distort(common, distortion, *count),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let category = match e.category() {
                Category::Config => "config",
                Category::Data => "data",
                Category::Numeric => "numeric",
            };
            eprintln!("stabletrain: {category} error: {}", e.to_string().trim_start_matches("config error: "));
            ExitCode::from(exit_code(&e))
        }
    }
}
