//! Training and evaluation orchestration: bookkeeping, determinism, checkpoint
//! round trips and a supervised toy run against the zero-filled baseline.

use std::path::Path;

use spic_ssdu::data::{build_dataset, save_dataset, Dataset, NoiseSpec};
use spic_ssdu::harness::{evaluate, evaluate_reconstructor, prepare_data, train_with, ExperimentConfig};
use spic_ssdu::losses::{Method, ZeroFilled};
use spic_ssdu::net::{load_checkpoint, UnrolledConfig, UnrolledNet};
use spic_ssdu::Error;

fn small(method: Method, steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(
        r#"{"seed": 3,
            "dataset": {"n_train": 4, "n_test": 2, "rows": 16, "cols": 16, "coils": 2, "seed": 5},
            "mask": {"acceleration": 2, "acs": 4},
            "optim": {"lr": 1e-3, "validate_every": 2, "n_validation": 2, "init_seed": 1},
            "output": {"images": false}}"#,
    )
    .unwrap();
    cfg.model = UnrolledConfig::tiny();
    cfg.loss.method = method;
    cfg.loss.levels = 2;
    cfg.optim.steps = steps;
    cfg
}

fn step_entries(log: &Path) -> usize {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .filter(|l| l.contains(r#""kind":"step""#))
        .count()
}

#[test]
fn five_step_smoke_run_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Method::Spicssdu, 5);
    let out = train_with(&cfg, &prepare_data(&cfg).unwrap(), dir.path()).unwrap();
    assert!(out.checkpoint.exists());
    assert_eq!(step_entries(&out.log), 5);
    assert_eq!(out.losses.len(), 5);
    let (header, _) = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(header.step, 5);
}

#[test]
fn serial_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Mmssdu, Method::Ccssdu, Method::Spicssdu] {
        let cfg = small(method, 4);
        let data = prepare_data(&cfg).unwrap();
        let runs: Vec<_> = (0..2)
            .map(|i| train_with(&cfg, &data, &dir.path().join(format!("{}{i}", method.name()))).unwrap())
            .collect();
        for file in [&runs[0].checkpoint, &runs[0].log] {
            let twin = runs[1].checkpoint.parent().unwrap().join(file.file_name().unwrap());
            assert_eq!(std::fs::read(file).unwrap(), std::fs::read(twin).unwrap(), "{method}");
        }
    }
}

#[test]
fn checkpoint_round_trip_reproduces_metrics_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Method::Supervised, 3);
    let data = prepare_data(&cfg).unwrap();
    let trained = train_with(&cfg, &data, &dir.path().join("run")).unwrap();
    let (direct, _) = evaluate_reconstructor(&trained.net, &data.test, &data.omega).unwrap();
    let (header, params) = load_checkpoint(&trained.checkpoint).unwrap();
    let loaded = UnrolledNet::new(header.config, params).unwrap();
    let (reloaded, _) = evaluate_reconstructor(&loaded, &data.test, &data.omega).unwrap();
    assert_eq!(direct, reloaded);

    let test_set = Dataset {
        slices: data.test.clone(),
        ..build_dataset(1, 16, 16, 2, NoiseSpec::noiseless(), 0).unwrap()
    };
    let path = dir.path().join("test_set");
    save_dataset(&test_set, &path).unwrap();
    let eval_dir = dir.path().join("eval");
    let from_disk = evaluate(&trained.checkpoint, &path, &cfg.mask, &eval_dir, 0).unwrap();
    assert_eq!(from_disk, direct);
    let csv = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + data.test.len() + 1);
}

#[test]
fn evaluation_rejects_a_dataset_of_another_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Method::Supervised, 1);
    let trained = train_with(&cfg, &prepare_data(&cfg).unwrap(), dir.path()).unwrap();
    let other = build_dataset(1, 16, 16, 3, NoiseSpec::noiseless(), 0).unwrap();
    let path = dir.path().join("other");
    save_dataset(&other, &path).unwrap();
    let err = evaluate(&trained.checkpoint, &path, &cfg.mask, dir.path().join("eval"), 0).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
}

#[test]
fn diverging_run_aborts_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::Supervised, 20);
    cfg.optim.lr = 1e200;
    let err = train_with(&cfg, &prepare_data(&cfg).unwrap(), dir.path()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let (header, params) = load_checkpoint(dir.path().join("last_good.bin")).unwrap();
    assert!(header.step < 20);
    assert!(params.values().iter().all(|v| v.is_finite()));
}

#[test]
fn supervised_toy_run_beats_zero_filled() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_json(
        r#"{"seed": 1,
            "dataset": {"n_train": 20, "n_test": 4, "rows": 64, "cols": 64, "coils": 8, "seed": 9},
            "mask": {"acceleration": 2, "acs": 8},
            "loss": {"method": "supervised"},
            "optim": {"steps": 200, "lr": 1e-3, "validate_every": 200, "n_validation": 4},
            "output": {"images": false}}"#,
    )
    .unwrap();
    cfg.model = UnrolledConfig::desk();
    let data = prepare_data(&cfg).unwrap();
    let trained = train_with(&cfg, &data, dir.path()).unwrap();
    let (validation_step, trained_psnr) = *trained.validation.last().unwrap();
    assert_eq!(validation_step, 199);
    let (zero_filled, _) = evaluate_reconstructor(&ZeroFilled, &data.test, &data.omega).unwrap();
    assert!(
        trained_psnr > zero_filled.psnr_mean,
        "trained {trained_psnr:.2} dB vs zero-filled {:.2} dB",
        zero_filled.psnr_mean
    );
}
