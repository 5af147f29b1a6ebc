use gradsift::data::SynthSpec;
use gradsift::harness::{
    load_splits, run_subsample_analysis, score_model, subsample_size, train_full, DatasetSource, ModelSpec, Splits,
};
use gradsift::importance::{NormConfig, ScoreTable};
use gradsift::sampling::{select_random, PolicyKind, SelectionPolicy, Subsample};
use gradsift::training::{evaluate, train, TrainConfig};
use gradsift::{Architecture, Model};

fn cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs: 30,
        lr_decay_epochs: vec![20],
        early_stop_patience: 0,
        probe_set_size: 0,
        ..TrainConfig::default()
    }
}

fn setup(spec: SynthSpec) -> (Splits, Architecture, ScoreTable, f64) {
    let splits = load_splits(&DatasetSource::Synth { spec, test_n: 2000 }, 0.1, 0).unwrap();
    let arch = ModelSpec::Linear.resolve(splits.train.feature_shape()).unwrap();
    let (model, _) = train_full(&arch, &splits, &cfg(), 0).unwrap();
    let full = evaluate(&model, &splits.test).unwrap();
    let scores = score_model(&model, &splits.train, NormConfig::default(), 0).unwrap();
    (splits, arch, scores, full)
}

#[test]
fn whole_training_set_matches_full_run() {
    let (splits, arch, scores, _) = setup(SynthSpec::diverse(5, 20, 2000, 3));
    for kind in PolicyKind::ALL {
        let mut accs = Vec::new();
        let mut fulls = Vec::new();
        for seed in [1, 2, 3] {
            let run = run_subsample_analysis(&scores, &splits, &arch, &SelectionPolicy::new(kind, seed), 1.0, &cfg())
                .unwrap();
            assert_eq!(run.subsample.indices, (0..splits.train.len()).collect::<Vec<_>>());
            accs.push(run.test_acc);
            let (m, _) = train_full(&arch, &splits, &cfg(), seed).unwrap();
            fulls.push(evaluate(&m, &splits.test).unwrap());
        }
        // Same seeds, same data, same schedule: the runs are identical.
        assert_eq!(accs, fulls, "{kind}");
    }
}

#[test]
fn single_example_subsample_still_trains() {
    let (splits, arch, scores, _) = setup(SynthSpec::redundant(4, 10, 400, 1));
    let fraction = 1.0 / scores.len() as f64;
    assert_eq!(subsample_size(scores.len(), fraction).unwrap(), 1);
    for kind in PolicyKind::ALL {
        let run = run_subsample_analysis(&scores, &splits, &arch, &SelectionPolicy::new(kind, 5), fraction, &cfg())
            .unwrap();
        assert_eq!(run.subsample.k, 1);
        assert!((0.0..=1.0).contains(&run.test_acc));
    }
    let tiny = 0.5 / scores.len() as f64;
    assert!(run_subsample_analysis(&scores, &splits, &arch, &SelectionPolicy::new(PolicyKind::Random, 0), tiny, &cfg())
        .is_err());
}

#[test]
fn persisted_scores_replay_identically() {
    let (splits, arch, scores, _) = setup(SynthSpec::diverse(4, 12, 800, 2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    scores.write(&path).unwrap();
    let reread = ScoreTable::read(&path).unwrap();
    assert_eq!(reread, scores);
    for kind in PolicyKind::ALL {
        let policy = SelectionPolicy::new(kind, 11);
        let a = run_subsample_analysis(&scores, &splits, &arch, &policy, 0.1, &cfg()).unwrap();
        let b = run_subsample_analysis(&reread, &splits, &arch, &policy, 0.1, &cfg()).unwrap();
        assert_eq!(a.subsample, b.subsample);
        assert_eq!(a.test_acc.to_bits(), b.test_acc.to_bits());
        let p = dir.path().join(format!("{kind}.idx"));
        a.subsample.write(&p).unwrap();
        assert_eq!(Subsample::read(&p).unwrap(), a.subsample);
    }
}

#[test]
fn subsamples_never_touch_validation_or_test() {
    let (splits, arch, scores, _) = setup(SynthSpec::redundant(3, 6, 600, 4));
    let val_origins = splits.val.origin().to_vec();
    for kind in PolicyKind::ALL {
        let run = run_subsample_analysis(&scores, &splits, &arch, &SelectionPolicy::new(kind, 2), 0.3, &cfg()).unwrap();
        let origins = splits.train.subset(&run.subsample.indices).unwrap().origin().to_vec();
        assert!(origins.iter().all(|o| val_origins.binary_search(o).is_err()));
        assert!(run.subsample.indices.iter().all(|&i| i < splits.train.len()));
    }
}

/// Generator claim: 1% of a redundant mixture trains a linear classifier to
/// ≥ 95% of its full-data accuracy, while 1% of a diverse mixture loses ≥ 5
/// points.
#[test]
fn redundant_and_diverse_generators_differ_at_one_percent() {
    for (spec, redundant) in [
        (SynthSpec::redundant(10, 20, 5000, 0), true),
        (SynthSpec::diverse(10, 20, 5000, 0), false),
    ] {
        let splits = load_splits(&DatasetSource::Synth { spec, test_n: 2000 }, 0.1, 0).unwrap();
        let arch = Architecture::Linear {
            input_dim: splits.train.feature_len(),
        };
        let (full_model, _) = train_full(&arch, &splits, &cfg(), 0).unwrap();
        let full = evaluate(&full_model, &splits.test).unwrap();
        let k = subsample_size(splits.train.len(), 0.01).unwrap();
        let sub = select_random(splits.train.len(), k, 0).unwrap();
        let subset = splits.train.subset(&sub.indices).unwrap();
        // Same number of SGD steps as the full run, so the comparison is about
        // the data rather than the optimisation budget.
        let base = cfg();
        let steps = |n: usize| n.div_ceil(base.batch_size);
        let scale = steps(splits.train.len()) / steps(k);
        let small_cfg = TrainConfig {
            epochs: base.epochs * scale,
            lr_decay_epochs: base.lr_decay_epochs.iter().map(|e| e * scale).collect(),
            ..base
        };
        let model = Model::new(arch.clone(), subset.class_count(), 0).unwrap();
        let (small, _) = train(model, &subset, &splits.val, &small_cfg).unwrap();
        let acc = evaluate(&small, &splits.test).unwrap();
        if redundant {
            assert!(acc >= 0.95 * full, "redundant: 1% {acc} vs full {full}");
        } else {
            assert!(full - acc >= 0.05, "diverse: 1% {acc} vs full {full}");
        }
    }
}
