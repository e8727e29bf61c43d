//! End-to-end training behavior on synthetic data.

mod common;

use common::{synthetic_dataset, toy_network, toy_train_settings};
use fusegnet::dataio::{make_folds, preprocess, PreprocessSettings};
use fusegnet::ensemble::{binarize, predict};
use fusegnet::losses::LossSettings;
use fusegnet::metrics::{confusion_counts, image_metrics};
use fusegnet::augment::AugmentationPlan;
use fusegnet::trainer::{train_fold, train_holdout, CheckpointRecord, TrainEvent, TrainSink};
use std::collections::BTreeSet;

#[test]
fn overfit_smoke_reaches_high_training_dsc() {
    let records = synthetic_dataset(64);
    let manifest = make_folds(&records, 2, 3).unwrap();
    let run = train_fold(
        &records,
        &manifest,
        0,
        &toy_network(),
        &LossSettings::default(),
        &AugmentationPlan::disabled(),
        &toy_train_settings(100),
        &mut TrainSink::in_memory(),
    )
    .unwrap();

    // Hybrid training loss collapses well below its first-epoch value.
    let first = run.log.first().unwrap().train_loss;
    let last = run.log.last().unwrap().train_loss;
    assert!(
        last < 0.5 * first,
        "train loss only moved from {first} to {last}"
    );

    // The best checkpoint segments its own training samples.
    let model = run.checkpoint.instantiate().unwrap();
    let train_ids: BTreeSet<String> = records
        .iter()
        .filter(|r| manifest.fold_of(&r.id) != Some(0))
        .map(|r| r.id.clone())
        .collect();
    for rec in records.iter().filter(|r| train_ids.contains(&r.id)) {
        let prob = predict(&model, &rec.image).unwrap();
        let mask = binarize(&prob, 0.5);
        let counts = confusion_counts(&mask, &rec.mask).unwrap();
        let dsc = image_metrics(&counts).dsc;
        assert!(dsc > 0.95, "sample {} overfit DSC {dsc}", rec.id);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let records = synthetic_dataset(64);
    let manifest = make_folds(&records, 2, 3).unwrap();
    let settings = toy_train_settings(2);
    let mut first_losses = Vec::new();
    for _ in 0..2 {
        let run = train_fold(
            &records,
            &manifest,
            0,
            &toy_network(),
            &LossSettings::default(),
            &AugmentationPlan::standard(),
            &settings,
            &mut TrainSink::in_memory(),
        )
        .unwrap();
        first_losses.push(run.log[0].train_loss);
    }
    assert!(
        (first_losses[0] - first_losses[1]).abs() < 1e-9,
        "epoch-1 losses diverged: {first_losses:?}"
    );
}

#[test]
fn validation_samples_are_never_augmented_and_never_train() {
    let records = synthetic_dataset(64);
    let manifest = make_folds(&records, 2, 3).unwrap();
    let fold = 1usize;
    let val_ids: BTreeSet<String> = manifest.ids_in_fold(fold).into_iter().collect();

    let mut augmented: BTreeSet<String> = BTreeSet::new();
    let mut stepped: BTreeSet<String> = BTreeSet::new();
    let mut observer = |event: TrainEvent<'_>| match event {
        TrainEvent::Augmented { id, .. } => {
            augmented.insert(id.to_string());
        }
        TrainEvent::GradientStep { ids, .. } => {
            stepped.extend(ids.iter().cloned());
        }
        TrainEvent::EpochEnd(_) => {}
    };
    let mut sink = TrainSink::in_memory();
    sink.observer = Some(&mut observer);
    train_fold(
        &records,
        &manifest,
        fold,
        &toy_network(),
        &LossSettings::default(),
        &AugmentationPlan::standard(),
        &toy_train_settings(3),
        &mut sink,
    )
    .unwrap();

    assert!(augmented.is_disjoint(&val_ids), "validation ids were augmented");
    assert!(stepped.is_disjoint(&val_ids), "validation ids reached the optimizer");
    let train_ids: BTreeSet<String> = records
        .iter()
        .map(|r| r.id.clone())
        .filter(|id| !val_ids.contains(id))
        .collect();
    assert_eq!(augmented, train_ids);
}

#[test]
fn single_epoch_run_returns_that_epoch() {
    let records = synthetic_dataset(64);
    let manifest = make_folds(&records, 2, 3).unwrap();
    let run = train_fold(
        &records,
        &manifest,
        0,
        &toy_network(),
        &LossSettings::default(),
        &AugmentationPlan::disabled(),
        &toy_train_settings(1),
        &mut TrainSink::in_memory(),
    )
    .unwrap();
    assert_eq!(run.checkpoint.epoch, 1);
    assert_eq!(run.log.len(), 1);
    assert_eq!(run.checkpoint.best_val_loss, run.log[0].val_loss);
    assert_eq!(run.checkpoint.best_val_iou, run.log[0].val_iou);
}

#[test]
fn checkpoint_artifacts_and_learning_rate_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let records = synthetic_dataset(64);
    let manifest = make_folds(&records, 2, 3).unwrap();
    let settings = toy_train_settings(4);
    let mut sink = TrainSink::to_dir(dir.path(), "fold0");
    let run = train_fold(
        &records,
        &manifest,
        0,
        &toy_network(),
        &LossSettings::default(),
        &AugmentationPlan::disabled(),
        &settings,
        &mut sink,
    )
    .unwrap();

    // Artifacts: checkpoint blob, sidecar, per-epoch CSV log.
    let ckpt = dir.path().join("fold0.ckpt");
    assert!(ckpt.exists());
    assert!(dir.path().join("fold0.meta.toml").exists());
    let log = std::fs::read_to_string(dir.path().join("fold0_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + run.log.len());
    assert!(log.starts_with("epoch,train_loss,val_loss,val_iou,lr,saved"));

    // The persisted best checkpoint reloads into an identical record.
    let loaded = CheckpointRecord::load(&ckpt).unwrap();
    assert_eq!(loaded.epoch, run.checkpoint.epoch);
    assert_eq!(loaded.fold_index, Some(0));
    assert_eq!(loaded.network, toy_network());
    assert_eq!(loaded.model_state, run.checkpoint.model_state);

    // Best scores are pointwise-optimal over the whole log.
    let min_loss = run.log.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let max_iou = run.log.iter().map(|r| r.val_iou).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(run.checkpoint.best_val_loss, min_loss);
    assert_eq!(run.checkpoint.best_val_iou, max_iou);

    // Learning rate never increases and stays a power-of-factor multiple.
    let mut prev = f64::INFINITY;
    for row in &run.log {
        assert!(row.lr <= prev);
        let m = (row.lr / settings.initial_lr).log(settings.plateau_factor);
        assert!((m - m.round()).abs() < 1e-9);
        prev = row.lr;
    }
}

#[test]
fn holdout_split_trains_without_a_manifest() {
    let records = synthetic_dataset(64);
    let run = train_holdout(
        &records,
        &toy_network(),
        &LossSettings::default(),
        &AugmentationPlan::disabled(),
        &toy_train_settings(2),
        &mut TrainSink::in_memory(),
    )
    .unwrap();
    assert_eq!(run.checkpoint.fold_index, None);
    assert_eq!(run.log.len(), 2);
}

#[test]
fn preprocessing_is_shared_between_training_and_prediction() {
    // The standardization used in training matches the predict path.
    let records = synthetic_dataset(64);
    let (fm, mask) = preprocess(&records[0], &PreprocessSettings::default()).unwrap();
    assert_eq!(fm.values().dim(), (64, 64, 3));
    assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
}
