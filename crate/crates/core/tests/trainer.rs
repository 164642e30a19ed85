mod common;

use fluid::fluid::train::{resume, train, TrainConfig};
use fluid::harness::{self, commands::MODEL_FILE, csvio};
use fluid::ssm::{make_dataset, Dataset, ModelSpec, SvSpec};

fn data() -> Dataset {
    let spec = ModelSpec::Sv(SvSpec::default());
    make_dataset(&spec, 40, 2, 12, None, 5).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 5e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn validation_loss_decreases() {
    let ds = data();
    let (_, report) = train(&ds.train, &ds.stats, &common::tiny_arch(true), &cfg(6), None).unwrap();
    let first = report.initial_val.unwrap().0;
    let last = report.curve.last().unwrap().val_nll;
    assert_eq!(report.curve.len(), 6);
    assert!(last < first, "val NLL {first} -> {last}");
    assert!(report.curve.iter().all(|e| e.train_nll.is_finite()));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let ds = data();
    let arch = common::tiny_arch(false);
    let (full, full_report) = train(&ds.train, &ds.stats, &arch, &cfg(4), None).unwrap();
    let (half, _) = train(&ds.train, &ds.stats, &arch, &cfg(2), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("half.fldm");
    half.save(&p, true).unwrap();
    let loaded = fluid::fluid::FluidModel::load(&p).unwrap();
    assert_eq!(loaded.trained_epochs, 2);
    let (rest, rest_report) = resume(loaded, &ds.train, &cfg(4), None).unwrap();
    assert_eq!(rest.trained_epochs, 4);
    assert_eq!(rest.params.flat_values(), full.params.flat_values());
    assert_eq!(
        rest_report.curve.last().unwrap().val_nll,
        full_report.curve.last().unwrap().val_nll
    );
}

#[test]
fn harness_resume_keeps_log_consistent() {
    let root = tempfile::tempdir().unwrap();
    let mut sets: Vec<&str> = common::TINY_SETS.to_vec();
    sets.retain(|s| !s.starts_with("train.epochs"));
    let full_sets: Vec<&str> = sets.iter().copied().chain(["train.epochs=4"]).collect();
    let half_sets: Vec<&str> = sets.iter().copied().chain(["train.epochs=2"]).collect();

    let full = common::preset_run("case1-desk", root.path().join("full"), &full_sets);
    harness::cmd_generate(&full).unwrap();
    harness::cmd_train(&full, None).unwrap();

    let half = common::preset_run("case1-desk", root.path().join("half"), &half_sets);
    harness::cmd_generate(&half).unwrap();
    harness::cmd_train(&half, None).unwrap();
    let ckpt = root.path().join("half.fldm");
    std::fs::copy(half.path(MODEL_FILE), &ckpt).unwrap();
    let cont = common::preset_run("case1-desk", root.path().join("half"), &full_sets);
    harness::cmd_train(&cont, Some(&ckpt)).unwrap();

    let a = csvio::read_csv(&full.path("train_log.csv")).unwrap();
    let b = csvio::read_csv(&cont.path("train_log.csv")).unwrap();
    assert_eq!(a.rows.len(), 5);
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(full.path(MODEL_FILE)).unwrap(),
        std::fs::read(cont.path(MODEL_FILE)).unwrap()
    );
}
