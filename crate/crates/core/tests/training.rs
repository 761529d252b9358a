mod common;

use common::*;
use smartsense::checkpoint;
use smartsense::data::Routine;
use smartsense::synth::SynthSpec;
use smartsense::train::{train, TrainSettings};
use smartsense::{Ablations, Dataset, Error, ModelConfig};

fn dataset(dir: &std::path::Path) -> Dataset {
    let spec = SynthSpec {
        window_length: 5,
        n_routines: 40,
        ..SynthSpec::grouped_example(60, 12, 0.9, 0.1, 31)
    };
    synthetic_dataset(&spec, dir, 2)
}

fn settings(epochs: usize) -> TrainSettings {
    TrainSettings {
        max_epochs: epochs,
        patience: epochs,
        seed: 9,
        ..TrainSettings::default()
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let config = small_model(&ds);
    let run = || train::<f64>(&ds.split.train, &ds.split.val, &ds.routines, &config, &settings(3), None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.report.loss_curve(), b.report.loss_curve());
    assert_eq!(a.params, b.params);
    let other = train::<f64>(
        &ds.split.train,
        &ds.split.val,
        &ds.routines,
        &config,
        &TrainSettings { seed: 10, ..settings(3) },
        None,
    )
    .unwrap();
    assert_ne!(a.report.loss_curve(), other.report.loss_curve());
}

#[test]
fn regularizer_off_ignores_routines_entirely() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let config = ModelConfig {
        ablations: Ablations::parse("reg").unwrap(),
        ..small_model(&ds)
    };
    let reversed: Vec<Routine> = ds
        .routines
        .iter()
        .map(|r| Routine {
            routine_id: r.routine_id.clone(),
            devices: r.devices.iter().rev().copied().collect(),
        })
        .collect();
    let with = train::<f64>(&ds.split.train, &ds.split.val, &ds.routines, &config, &settings(2), None).unwrap();
    let alt = train::<f64>(&ds.split.train, &ds.split.val, &reversed[..3], &config, &settings(2), None).unwrap();
    let none = train::<f64>(&ds.split.train, &ds.split.val, &[], &config, &settings(2), None).unwrap();
    assert_eq!(with.report.loss_curve(), alt.report.loss_curve());
    assert_eq!(with.params, alt.params);
    assert_eq!(with.params, none.params);

    let on = small_model(&ds);
    let reg = train::<f64>(&ds.split.train, &ds.split.val, &ds.routines, &on, &settings(2), None).unwrap();
    assert_ne!(reg.params, with.params);
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    // A vanishing step size leaves validation mAP@1 flat, so nothing after
    // the first epoch is a strict improvement.
    let config = ModelConfig {
        lr: 1e-15,
        ..small_model(&ds)
    };
    let ckpt_dir = dir.path().join("run");
    let s = TrainSettings {
        max_epochs: 10,
        patience: 2,
        checkpoint_dir: Some(ckpt_dir.clone()),
        ..settings(10)
    };
    let out = train::<f64>(&ds.split.train, &ds.split.val, &ds.routines, &config, &s, Some(&ds.vocab)).unwrap();
    assert_eq!(out.report.epochs.len(), 3);
    assert_eq!(out.report.best_epoch, 1);
    let saved = checkpoint::load::<f64>(&ckpt_dir.join("best.ckpt")).unwrap();
    assert_eq!(saved.params, out.params);
    assert_eq!(saved.vocabulary.as_ref(), Some(&ds.vocab));
    let metrics = std::fs::read_to_string(ckpt_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,train_loss,val_map1,seconds"));
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn training_reduces_loss_and_beats_chance() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        window_length: 5,
        ..SynthSpec::grouped_example(400, 12, 0.9, 0.1, 32)
    };
    let ds = synthetic_dataset(&spec, dir.path(), 2);
    let config = ModelConfig {
        d: 16,
        ..small_model(&ds)
    };
    let out = train::<f64>(&ds.split.train, &ds.split.val, &ds.routines, &config, &settings(10), None).unwrap();
    let curve = out.report.loss_curve();
    assert!(curve.last().unwrap() < &curve[0], "{curve:?}");
    assert!(out.report.best_val_map1 > 5.0 / config.num_controls as f64, "{:?}", out.report.epochs);
}

#[test]
fn single_precision_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let out = train::<f32>(&ds.split.train, &ds.split.val, &ds.routines, &small_model(&ds), &settings(2), None).unwrap();
    assert!(out.params.is_finite());
    assert!(out.report.loss_curve().iter().all(|l| l.is_finite()));
}

#[test]
fn diverging_run_reports_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let config = ModelConfig {
        lr: 1e300,
        ..small_model(&ds)
    };
    match train::<f64>(&ds.split.train, &ds.split.val, &ds.routines, &config, &settings(3), None) {
        Err(Error::NonFiniteLoss { step }) => assert!(step >= 1),
        other => panic!("{:?}", other.map(|o| o.report)),
    }
}
