use std::fs;
use std::path::Path;

use blindfill::config::{DiscKind, TrainConfig};
use blindfill::dataset::{
    load_sample, scan_dataset, synthesize_split, Batch, DatasetIndex, Layout, Split,
};
use blindfill::generator::Branches;
use blindfill::marker::MarkerPolicy;
use blindfill::metrics::{evaluate, EvalSample};
use blindfill::perceptual::PerceptualSpec;
use blindfill::synthetic::write_phantom_split;
use blindfill::trainer::{batch_plan, load_checkpoint, save_checkpoint, train, RunDir, TrainState};
use blindfill::Error;

fn paired_corpus(root: &Path, n: usize, side: usize) -> DatasetIndex {
    write_phantom_split(root, Split::Train, n, (side, side), 3).unwrap();
    synthesize_split(root, Split::Train, &MarkerPolicy::default(), 3).unwrap();
    scan_dataset(root, Layout::Paired, Split::Train, (side, side)).unwrap()
}

fn small(side: usize) -> TrainConfig {
    TrainConfig {
        image_size: side,
        generator_widths: (8, 16),
        detector_widths: vec![8, 8, 16, 16],
        perceptual: PerceptualSpec::Random {
            blocks: vec![(8, 1), (16, 1)],
            seed: 0,
        },
        augment: false,
        ..TrainConfig::default()
    }
}

#[test]
fn overfitting_eight_samples_halves_the_reconstruction_loss() {
    let dir = tempfile::tempdir().unwrap();
    let index = paired_corpus(dir.path(), 8, 64);
    let mut state = TrainState::new(TrainConfig {
        max_steps: 200,
        generator_widths: (16, 32),
        augment: false,
        ..TrainConfig::default()
    })
    .unwrap();
    let trace = train(&mut state, &index, None).unwrap();
    let (first, last) = (trace[0].rec, trace[trace.len() - 1].rec);
    assert!(last < 0.5 * first, "rec {first} -> {last}");
}

#[test]
fn single_branch_and_patch_ablations_also_learn() {
    let dir = tempfile::tempdir().unwrap();
    let index = paired_corpus(dir.path(), 4, 32);
    for (disc, branches) in [
        (DiscKind::Detector, Branches::Single),
        (DiscKind::Patch, Branches::Two),
    ] {
        let mut state = TrainState::new(TrainConfig {
            max_steps: 60,
            batch_size: 2,
            disc,
            branches,
            ..small(32)
        })
        .unwrap();
        let trace = train(&mut state, &index, None).unwrap();
        let head: f64 = trace[..5].iter().map(|r| r.rec).sum::<f64>() / 5.0;
        let tail: f64 = trace[trace.len() - 5..].iter().map(|r| r.rec).sum::<f64>() / 5.0;
        assert!(tail < head, "{disc:?}/{branches:?}: rec {head} -> {tail}");
    }
}

#[test]
fn reloaded_checkpoint_reproduces_the_metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let index = paired_corpus(dir.path(), 4, 32);
    let mut state = TrainState::new(TrainConfig {
        max_steps: 10,
        batch_size: 2,
        ..small(32)
    })
    .unwrap();
    train(&mut state, &index, None).unwrap();
    let samples = || {
        (0..index.len()).map(|i| {
            load_sample(&index, i, &MarkerPolicy::default(), 0, false).map(|s| EvalSample {
                name: s.name,
                corrupted: s.corrupted,
                clean: s.clean,
                boxes: s.boxes,
            })
        })
    };
    let before = evaluate(&state.generator, samples()).unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let after = evaluate(&load_checkpoint(&path).unwrap().generator, samples()).unwrap();
    assert_eq!(before, after);
    assert_eq!(before.summary_json(), after.summary_json());
}

#[test]
fn every_emitted_checkpoint_gives_finite_losses_on_its_batch() {
    let dir = tempfile::tempdir().unwrap();
    let index = paired_corpus(dir.path(), 3, 32);
    let run = RunDir::new(dir.path().join("run"));
    let mut state = TrainState::new(TrainConfig {
        max_steps: 6,
        batch_size: 2,
        checkpoint_every: 2,
        ..small(32)
    })
    .unwrap();
    train(&mut state, &index, Some(&run)).unwrap();
    let mut seen = 0;
    for entry in fs::read_dir(run.checkpoints()).unwrap() {
        let path = entry.unwrap().path();
        let mut loaded = load_checkpoint(&path).unwrap();
        let (ids, epoch_seed) = batch_plan(&loaded.config, index.len(), loaded.step).unwrap();
        let batch = Batch::load(&index, &ids, &loaded.config.marker, epoch_seed, false).unwrap();
        let report = loaded.train_step(&batch).unwrap();
        assert!(
            report.total_gen.is_finite() && report.total_disc.is_finite(),
            "{}",
            path.display()
        );
        seen += 1;
    }
    // steps 2, 4, 6 plus last.ckpt
    assert_eq!(seen, 4);
}

#[test]
fn unwritable_checkpoint_location_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("not_a_dir");
    fs::write(&blocker, b"x").unwrap();
    let state = TrainState::new(small(32)).unwrap();
    let err = save_checkpoint(&state, &blocker.join("model.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let err = TrainState::new(TrainConfig {
        batch_size: 0,
        learning_rate: -1.0,
        ..TrainConfig::default()
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("batch_size") && msg.contains("learning_rate"),
        "{msg}"
    );
}

#[test]
fn empty_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let index = DatasetIndex {
        root: dir.path().to_path_buf(),
        split: Split::Train,
        layout: Layout::CleanOnly,
        entries: vec![],
        image_size: (32, 32),
    };
    let mut state = TrainState::new(small(32)).unwrap();
    assert!(matches!(
        train(&mut state, &index, None),
        Err(Error::Dataset(_))
    ));
}
