//! The `stabletrain` binary: exit codes, messages and output layout.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn stabletrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stabletrain"))
        .args(args)
        .env_remove("STABLETRAIN_OUT")
        .output()
        .unwrap()
}

fn with_smoke(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = fixture("smoke.toml");
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    stabletrain(&args)
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Writes `smoke.toml` with `edit` applied to a scratch directory.
fn edited_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let text = std::fs::read_to_string(fixture("smoke.toml")).unwrap();
    let path = dir.join("exp.toml");
    std::fs::write(&path, edit(text)).unwrap();
    path
}

#[test]
fn dry_run_lists_every_grid_point() {
    let out = tempfile::tempdir().unwrap();
    let text = ok(&with_smoke("run", out.path(), &["--dry-run"]));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("8 grid points"));
    let ids: Vec<&str> = lines.map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(ids.len(), 8);
    assert_eq!(ids[0], "000_stability_alpha=0.01_gaussian=0.01");
    assert_eq!(ids[7], "007_augment_p=1_gaussian=1");
    assert!(!out.path().join("manifest.toml").exists());
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |t| {
        let start = t.find("[data.synthetic]").unwrap();
        let end = t.find("[pipeline]").unwrap();
        format!(
            "{}[data.idx]\nimages = \"nowhere/images.idx\"\nlabels = \"nowhere/labels.idx\"\n\n{}",
            &t[..start],
            &t[end..]
        )
    });
    let out = dir.path().join("out");
    let o = stabletrain(&["train-baseline", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("config error") && msg.contains("images.idx"), "{msg}");
}

#[test]
fn unknown_method_names_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |t| t.replacen("method = \"augment\"", "method = \"mixup\"", 1));
    let o = stabletrain(&["run", "--dry-run", "-c", cfg.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for name in ["stability", "stability_sym", "augment", "adversarial"] {
        assert!(msg.contains(name), "{name} missing from: {msg}");
    }
}

#[test]
fn report_and_run_need_earlier_stages() {
    let out = tempfile::tempdir().unwrap();
    let o = with_smoke("report", out.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no runs"), "{}", stderr(&o));
    let o = with_smoke("run", out.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train-baseline"), "{}", stderr(&o));
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let from_cfg = dir.path().join("from_config");
    let cfg = edited_config(dir.path(), |t| {
        t.replacen("jobs = 1", &format!("jobs = 1\nout = {:?}", from_cfg.to_str().unwrap()), 1)
    });
    let bare = dir.path().join("bare.toml");
    std::fs::copy(fixture("smoke.toml"), &bare).unwrap();
    let from_env = dir.path().join("from_env");
    let from_flag = dir.path().join("from_flag");
    let run = |cfg: &Path, flag: Option<&Path>, env: bool| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_stabletrain"));
        c.args(["report", "-c", cfg.to_str().unwrap()]);
        if let Some(f) = flag {
            c.args(["--out", f.to_str().unwrap()]);
        }
        c.env_remove("STABLETRAIN_OUT");
        if env {
            c.env("STABLETRAIN_OUT", &from_env);
        }
        stderr(&c.output().unwrap())
    };
    let named = |msg: String, p: &Path| assert!(msg.contains(&format!("no runs in {}", p.display())), "{msg}");
    named(run(&cfg, Some(&from_flag), true), &from_flag);
    named(run(&cfg, None, true), &from_cfg);
    named(run(&bare, None, true), &from_env);
    let msg = run(&bare, None, false);
    assert!(msg.contains("no output directory"), "{msg}");
}

#[test]
fn seed_flag_reproduces_the_baseline() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    ok(&with_smoke("train-baseline", a.path(), &["--seed", "7"]));
    ok(&with_smoke("train-baseline", b.path(), &["--seed", "7"]));
    ok(&with_smoke("train-baseline", c.path(), &["--seed", "8"]));
    let ckpt = |d: &Path| digest(&d.join("baseline/best.stbl"));
    assert_eq!(ckpt(a.path()), ckpt(b.path()));
    assert_ne!(ckpt(a.path()), ckpt(c.path()));
    let manifest = std::fs::read_to_string(a.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 7"), "{manifest}");
    // a different seed on an existing experiment is refused
    let o = with_smoke("train-baseline", a.path(), &["--seed", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_pipeline_resumes_and_leaves_checkpoints_alone() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path();
    let text = ok(&with_smoke("train-baseline", dir, &[]));
    assert!(text.starts_with("baseline: selected epoch "), "{text}");
    assert!(ok(&with_smoke("run", dir, &[])).contains("8 runs executed, 0 already complete"));
    assert!(ok(&with_smoke("run", dir, &[])).contains("0 runs executed, 8 already complete"));

    let ckpts: Vec<PathBuf> = std::iter::once(dir.join("baseline/best.stbl"))
        .chain(
            std::fs::read_dir(dir.join("runs"))
                .unwrap()
                .map(|e| e.unwrap().path().join("best.stbl")),
        )
        .collect();
    assert_eq!(ckpts.len(), 9);
    let before: Vec<String> = ckpts.iter().map(|p| digest(p)).collect();
    ok(&with_smoke("evaluate", dir, &[]));
    let after: Vec<String> = ckpts.iter().map(|p| digest(p)).collect();
    assert_eq!(before, after, "evaluation modified a checkpoint");

    ok(&with_smoke("report", dir, &[]));
    let report = dir.join("report");
    for f in ["curves.csv", "summary.txt", "gaussian_to_gaussian.svg", "gaussian_to_jpeg.svg"] {
        assert!(report.join(f).is_file(), "{f} missing");
    }
    let svg = std::fs::read_to_string(report.join("gaussian_to_jpeg.svg")).unwrap();
    roxmltree::Document::parse(&svg).expect("well-formed SVG");
    let rows = csv::Reader::from_path(report.join("curves.csv")).unwrap().records().count();
    let per_run: usize = {
        let set: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("curves.json")).unwrap()).unwrap();
        set["tests"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["intensities"].as_array().unwrap().len())
            .sum()
    };
    assert_eq!(rows, 9 * per_run);

    let first = std::fs::read(report.join("curves.csv")).unwrap();
    ok(&with_smoke("report", dir, &[]));
    assert_eq!(first, std::fs::read(report.join("curves.csv")).unwrap());
}

#[test]
fn distort_dumps_image_pairs() {
    let out = tempfile::tempdir().unwrap();
    let text = ok(&with_smoke("distort", out.path(), &["--distortion", "jpeg:30+rotation:15", "--count", "3"]));
    assert!(text.starts_with("3 image pairs"), "{text}");
    let files: Vec<String> = std::fs::read_dir(out.path().join("distort"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(files.len(), 6);
    assert!(files.iter().any(|f| f == "000_clean.ppm"));
    let o = with_smoke("distort", out.path(), &["--distortion", "fgsm:0.01"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("baseline checkpoint"), "{}", stderr(&o));
}
