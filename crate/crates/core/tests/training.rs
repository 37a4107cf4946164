use std::path::Path;

use candle_core::Tensor;
use dae_core::data::{generate_deformed_mnist, BaseSet, Dataset, DeformSpec};
use dae_core::networks::{ModelConfig, Variant};
use dae_core::training::{
    latest_checkpoint, load_checkpoint, load_model, metrics_path, save_checkpoint, train_loop,
    TrainConfig, Trainer,
};

fn digits(per_digit: usize, which: &[u8]) -> Dataset {
    let base = BaseSet::procedural(which, per_digit, 0).unwrap();
    generate_deformed_mnist(&DeformSpec::default(), &base).unwrap()
}

fn tiny(out: &Path) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 7,
        model: ModelConfig {
            base_filters: 4,
            z_texture: 1,
            ..ModelConfig::default()
        },
        checkpoint_every: 0,
        sample_every: 0,
        grid_samples: 2,
        output_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}

fn params(t: &Trainer) -> Vec<(String, Vec<f32>)> {
    t.model
        .params()
        .vars()
        .map(|(n, v)| {
            (
                n.to_string(),
                v.as_tensor()
                    .flatten_all()
                    .unwrap()
                    .to_vec1::<f32>()
                    .unwrap(),
            )
        })
        .collect()
}

#[test]
fn seeded_runs_write_identical_metrics() {
    let data = digits(12, &[3]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_loop(&tiny(a.path()), &data).unwrap();
    train_loop(&tiny(b.path()), &data).unwrap();
    let ma = std::fs::read_to_string(metrics_path(a.path())).unwrap();
    let mb = std::fs::read_to_string(metrics_path(b.path())).unwrap();
    assert_eq!(ma.lines().count(), 1 + 6);
    assert_eq!(ma, mb);
    assert!(a.path().join("samples/final.png").exists());
}

#[test]
fn crash_and_resume_replays_the_same_trajectory() {
    let data = digits(12, &[3]);
    let full = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every_steps: Some(2),
        ..tiny(full.path())
    };
    train_loop(&cfg, &data).unwrap();

    let run = tempfile::tempdir().unwrap();
    let partial = TrainConfig {
        max_steps: Some(5),
        checkpoint_every_steps: Some(2),
        ..tiny(run.path())
    };
    train_loop(&partial, &data).unwrap();
    // lose everything after the step-4 checkpoint, as if the process died at step 5
    let ckpts = run.path().join("checkpoints");
    std::fs::copy(
        ckpts.join("step-00000004.safetensors"),
        latest_checkpoint(run.path()),
    )
    .unwrap();
    let resumed = TrainConfig {
        resume: true,
        checkpoint_every_steps: Some(2),
        ..tiny(run.path())
    };
    let summary = train_loop(&resumed, &data).unwrap();
    assert_eq!(summary.steps, 6);

    let a = std::fs::read_to_string(metrics_path(full.path())).unwrap();
    let b = std::fs::read_to_string(metrics_path(run.path())).unwrap();
    assert_eq!(a, b);
    let steps: Vec<u64> = b
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
}

#[test]
fn checkpoint_round_trip_preserves_the_model() {
    let data = digits(4, &[3]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut t = Trainer::new(&cfg).unwrap();
    t.set_dump_dir(None);
    let x = data.batch(&[0, 1, 2, 3]).unwrap();
    t.train_step(&x, None).unwrap();
    let path = dir.path().join("c.safetensors");
    save_checkpoint(&path, &t.checkpoint(Some(&cfg)).unwrap()).unwrap();

    let restored = load_model(&path, Some(&cfg.model)).unwrap();
    for (name, var) in t.model.params().vars() {
        let other = restored.params().param(name).unwrap();
        let a = var
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = other
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b, "{name}");
    }
    let before = t.model.forward(&x, false).unwrap().reconstruction;
    let after = restored.forward(&x, false).unwrap().reconstruction;
    let diff = (before - after)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    assert!(diff <= 1e-7);

    let wrong = ModelConfig {
        z_warp: 16,
        ..cfg.model.clone()
    };
    assert!(load_checkpoint(&path, Some(&wrong)).is_err());
    assert!(load_model(&path, Some(&wrong)).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let data = digits(4, &[3]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..tiny(dir.path())
    };
    let mut t = Trainer::new(&cfg).unwrap();
    let before = params(&t);
    let report = t
        .train_step(&data.batch(&[0, 1, 2, 3]).unwrap(), None)
        .unwrap();
    assert!(report.total.is_finite() && report.total > 0.0);
    assert_eq!(before, params(&t));
}

#[test]
fn second_step_rarely_increases_the_loss() {
    let data = digits(4, &[3]);
    let x = data.batch(&[0, 1, 2, 3]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut ok = 0;
    for seed in 0..50 {
        let cfg = TrainConfig {
            seed,
            learning_rate: 2e-4,
            ..tiny(dir.path())
        };
        let mut t = Trainer::new(&cfg).unwrap();
        let first = t.train_step(&x, None).unwrap().total;
        let second = t.train_step(&x, None).unwrap().total;
        if second <= first {
            ok += 1;
        }
    }
    assert!(ok >= 48, "loss decreased in only {ok}/50 trials");
}

#[test]
fn class_aware_steps_report_cross_entropy() {
    let data = digits(2, &[0, 1, 2, 3]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            base_filters: 4,
            ..ModelConfig::class_aware(4, 4)
        },
        ..tiny(dir.path())
    };
    assert_eq!(cfg.model.variant, Variant::ClassAware);
    let mut t = Trainer::new(&cfg).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let labels: Tensor = data.label_batch(&idx).unwrap();
    let report = t
        .train_step(&data.batch(&idx).unwrap(), Some(&labels))
        .unwrap();
    assert!(report.ce > 0.0);
    assert!(t.train_step(&data.batch(&idx).unwrap(), None).is_err());
}

#[test]
fn adversarial_runs_train_both_players() {
    let data = digits(4, &[3]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            use_adversarial: true,
            ..tiny(dir.path()).model
        },
        ..tiny(dir.path())
    };
    let mut t = Trainer::new(&cfg).unwrap();
    let report = t
        .train_step(&data.batch(&[0, 1, 2, 3]).unwrap(), None)
        .unwrap();
    assert!(report.adv_d > 0.0 && report.adv_g > 0.0);
    let ckpt = t.checkpoint(Some(&cfg)).unwrap();
    assert!(ckpt.tensors.keys().any(|k| k.starts_with("disc/")));
}
