//! Training runs: output files, early stopping, reproducibility and
//! configuration errors.

use stabletrain::checkpoint::Checkpoint;
use stabletrain::data::{load_synthetic, split_per_class, Pipeline, SyntheticSpec};
use stabletrain::distortions::DistortionSpec;
use stabletrain::nn::ModelConfig;
use stabletrain::train::{load_model, select_epoch, Method, TrainConfig, Trainer, TrainingData};
use stabletrain::Category;

fn data() -> TrainingData {
    let spec = SyntheticSpec {
        classes: 3,
        per_class: 20,
        side: 14,
        ..SyntheticSpec::desk()
    };
    let ds = load_synthetic(&spec, 2).unwrap();
    let (tr, va, _) = split_per_class(&ds, 14, 4, 2).unwrap();
    TrainingData::new(Pipeline { resize: 14, crop: 12 }, &tr, &va).unwrap()
}

fn model() -> ModelConfig {
    ModelConfig {
        height: 12,
        width: 12,
        channels: 3,
        classes: 3,
        stem_channels: 4,
        stem_stride: 1,
        stage_blocks: vec![1, 1],
        norm: true,
    }
}

fn short(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::baseline(seed)
    }
}

#[test]
fn run_directory_holds_log_checkpoints_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let (d, m, cfg) = (data(), model(), short(1));
    let out = Trainer {
        cfg: &cfg,
        data: &d,
        model_cfg: &m,
        init: None,
        out_dir: Some(dir.path()),
    }
    .run(None)
    .unwrap();
    for e in 1..=3 {
        assert!(dir.path().join(format!("epoch_{e:03}.stbl")).is_file());
    }
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,train_loss,val_acc,wall_time\n"));

    let val: Vec<f64> = out.record.epochs.iter().map(|e| e.val_acc).collect();
    assert_eq!(Some(out.record.selected_epoch), select_epoch(&val));
    let best = Checkpoint::<f32>::load(&dir.path().join("best.stbl")).unwrap();
    assert_eq!(best.epoch as usize, out.record.selected_epoch);
    let epoch = Checkpoint::<f32>::load(&dir.path().join(format!("epoch_{:03}.stbl", best.epoch))).unwrap();
    assert_eq!(best, epoch);
    assert_eq!(load_model(&dir.path().join("best.stbl")).unwrap(), out.best.model);
    assert!(best.optimizer.is_some());

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(json["selected_epoch"], out.record.selected_epoch);
    assert_eq!(json["selection_split"], "val (undistorted)");
}

#[test]
fn same_seed_same_run_different_seed_differs() {
    let (d, m) = (data(), model());
    let run = |seed| {
        let cfg = short(seed);
        Trainer {
            cfg: &cfg,
            data: &d,
            model_cfg: &m,
            init: None,
            out_dir: None,
        }
        .run(None)
        .unwrap()
    };
    let (a, b, c) = (run(4), run(4), run(5));
    assert_eq!(a.best, b.best);
    assert_eq!(a.record.without_timing(), b.record.without_timing());
    assert_ne!(a.best.model, c.best.model);
}

#[test]
fn fine_tuning_methods_run_and_report_augmented_fraction() {
    let (d, m) = (data(), model());
    let base_cfg = short(0);
    let base = Trainer {
        cfg: &base_cfg,
        data: &d,
        model_cfg: &m,
        init: None,
        out_dir: None,
    }
    .run(None)
    .unwrap();
    let noise = DistortionSpec::Gaussian { sigma: 0.1 };
    let cases = [
        (Method::Stability, Some(0.5), noise.clone(), 1.0),
        (Method::StabilitySym, Some(0.5), noise.clone(), 1.0),
        (Method::Augment, Some(1.0), noise.clone(), 1.0),
        (Method::Augment, Some(0.0), noise, 0.0),
        (Method::Adversarial, Some(0.5), DistortionSpec::Fgsm { epsilon: 0.01 }, 1.0),
    ];
    for (method, value, dist, fraction) in cases {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::fine_tune(method, value, dist, 0)
        };
        let out = Trainer {
            cfg: &cfg,
            data: &d,
            model_cfg: &m,
            init: Some(&base.best.model),
            out_dir: None,
        }
        .run(None)
        .unwrap();
        let e = &out.record.epochs[0];
        assert!(e.train_loss.is_finite(), "{method}");
        assert_eq!(e.augmented_fraction, fraction, "{method}");
    }
}

#[test]
fn mismatched_model_and_bad_hyperparameters_are_config_errors() {
    let d = data();
    let cfg = short(0);
    let wrong = ModelConfig { classes: 5, ..model() };
    let err = Trainer {
        cfg: &cfg,
        data: &d,
        model_cfg: &wrong,
        init: None,
        out_dir: None,
    }
    .run(None)
    .err()
    .unwrap();
    assert_eq!(err.category(), Category::Config);

    let m = model();
    let bad = TrainConfig::fine_tune(Method::Augment, Some(1.5), DistortionSpec::Gaussian { sigma: 0.1 }, 0);
    let err = Trainer {
        cfg: &bad,
        data: &d,
        model_cfg: &m,
        init: None,
        out_dir: None,
    }
    .run(None)
    .err()
    .unwrap();
    assert_eq!(err.category(), Category::Config, "{err}");
}

#[test]
fn divergent_learning_rate_is_a_numeric_error() {
    let (d, m) = (data(), model());
    let cfg = TrainConfig {
        lr: 1e30,
        ..short(0)
    };
    let err = Trainer {
        cfg: &cfg,
        data: &d,
        model_cfg: &m,
        init: None,
        out_dir: None,
    }
    .run(None)
    .err()
    .unwrap();
    assert_eq!(err.category(), Category::Numeric, "{err}");
    assert!(err.to_string().contains("epoch 1 step"), "{err}");
}
