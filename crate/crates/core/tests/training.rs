mod common;

use treecaps::ast::{generate_synthetic_corpus, split, SyntheticSpec};
use treecaps::capsules::RoutingConfig;
use treecaps::embeddings::EmbeddingTable;
use treecaps::model::{ModelConfig, TreeCaps};
use treecaps::training::{
    evaluate, metrics_csv, train, Checkpoint, Ensemble, Evaluation, Optimizer, OptimizerKind,
    TrainConfig, TrainError,
};
use treecaps::{Sample, Tensor, Vocabulary};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 4,
        model: ModelConfig {
            embed_dim: 8,
            conv_dim: 8,
            slices: 2,
            primary_dim: 4,
            routing: RoutingConfig {
                static_caps: 4,
                ..RoutingConfig::default()
            },
            code_dim: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn corpus(per_class: usize) -> (Vec<Sample>, Vec<String>) {
    let spec = SyntheticSpec::six_class();
    (
        generate_synthetic_corpus(&spec, per_class, 42).unwrap(),
        spec.class_names(),
    )
}

#[test]
fn quadratic_converges() {
    for kind in [OptimizerKind::Radam, OptimizerKind::Adam] {
        let mut opt = Optimizer::new(kind);
        let mut x = Tensor::vector(vec![0.0f64]);
        for _ in 0..200 {
            // d/dx (x - 3)^2
            let grad = Tensor::vector(vec![2.0 * (x.data()[0] - 3.0)]);
            opt.step([&mut x], &[grad], 0.1).unwrap();
        }
        assert!(
            (x.data()[0] - 3.0).abs() < 1e-3,
            "{kind:?}: {}",
            x.data()[0]
        );
    }
}

#[test]
fn single_sample_is_memorized() {
    let (samples, names) = corpus(1);
    let one = vec![samples[0].clone()];
    let vocab = Vocabulary::build(&one);
    // one sample means one optimizer step per epoch, so no per-epoch decay
    let cfg = TrainConfig {
        epochs: 800,
        lr_decay: 1.0,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let out = train(&one, &one, &vocab, &names, &cfg, None).unwrap();
    let last = out.history.last().unwrap();
    assert!(last.train_loss < 1e-3, "{last:?}");
    let pred = out.checkpoint.model.predict(&one[0].tree).unwrap();
    assert_eq!(pred.class, one[0].label);
}

#[test]
fn seeded_runs_are_identical() {
    let (samples, names) = corpus(10);
    let s = split(&samples, [0.6, 0.2, 0.2], 1).unwrap();
    let vocab = Vocabulary::build(&s.train);
    let cfg = tiny_config();
    let a = train(&s.train, &s.validation, &vocab, &names, &cfg, None).unwrap();
    let b = train(&s.train, &s.validation, &vocab, &names, &cfg, None).unwrap();
    assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = train(
        &s.train,
        &s.validation,
        &vocab,
        &names,
        &TrainConfig { seed: 5, ..cfg },
        None,
    )
    .unwrap();
    assert_ne!(metrics_csv(&a.history), metrics_csv(&c.history));
}

#[test]
fn best_checkpoint_tracks_validation() {
    let (samples, names) = corpus(10);
    let s = split(&samples, [0.6, 0.2, 0.2], 1).unwrap();
    let vocab = Vocabulary::build(&s.train);
    let out = train(
        &s.train,
        &s.validation,
        &vocab,
        &names,
        &tiny_config(),
        None,
    )
    .unwrap();
    let best = out
        .history
        .iter()
        .map(|r| r.val_accuracy)
        .fold(f64::MIN, f64::max);
    let first_best = out
        .history
        .iter()
        .find(|r| r.val_accuracy == best)
        .unwrap()
        .epoch;
    assert_eq!(out.best_epoch, first_best);
    assert_eq!(out.checkpoint.validation_accuracy, Some(best));
    let ev = evaluate(&out.checkpoint.model, &s.validation, &names).unwrap();
    assert_eq!(ev.accuracy, best);
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let (samples, names) = corpus(3);
    let vocab = Vocabulary::build(&samples);
    let cfg = tiny_config();
    let mut table = EmbeddingTable::<f32>::init(&vocab, cfg.model.embed_dim, 0).unwrap();
    table.row_mut(vocab.id("Module")).fill(f32::NAN);
    match train(&samples, &samples, &vocab, &names, &cfg, Some(&table)) {
        Err(TrainError::NonFinite { epoch, .. }) => assert_eq!(epoch, 1),
        other => panic!(
            "expected a non-finite abort, got {:?}",
            other.map(|o| o.history)
        ),
    }
}

#[test]
fn invalid_inputs_rejected_before_training() {
    let (samples, names) = corpus(3);
    let vocab = Vocabulary::build(&samples);
    let bad = TrainConfig {
        m_plus: 0.05,
        batch_size: 0,
        ..tiny_config()
    };
    let err = train(&samples, &samples, &vocab, &names, &bad, None)
        .err()
        .unwrap()
        .to_string();
    assert!(
        err.contains("batch_size") && err.contains("m_plus"),
        "{err}"
    );
    assert!(matches!(
        train(&samples, &[], &vocab, &names, &tiny_config(), None),
        Err(TrainError::EmptySplit("validation"))
    ));
    assert!(matches!(
        train(
            &samples,
            &samples,
            &vocab,
            &names[..2],
            &tiny_config(),
            None
        ),
        Err(TrainError::Label { .. })
    ));
}

fn untrained(seed: u64) -> (Checkpoint, Vec<Sample>, Vec<String>) {
    let (samples, names) = corpus(4);
    let vocab = Vocabulary::build(&samples);
    let model = TreeCaps::new(tiny_config().model, vocab, names.len(), seed).unwrap();
    (
        Checkpoint {
            model,
            class_names: names.clone(),
            validation_accuracy: Some(0.5),
            train: None,
        },
        samples,
        names,
    )
}

#[test]
fn evaluation_is_consistent() {
    let (ck, samples, names) = untrained(1);
    let ev = evaluate(&ck.model, &samples, &names).unwrap();
    let trace: usize = (0..names.len()).map(|c| ev.confusion[c][c]).sum();
    assert_eq!(ev.accuracy, trace as f64 / samples.len() as f64);
    for (c, row) in ev.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), ev.per_class[c].support);
    }
    assert!(matches!(
        evaluate(&ck.model, &samples, &names[..5]),
        Err(TrainError::Incompatible(_))
    ));
    let json: Evaluation = serde_json::from_str(&ev.to_json()).unwrap();
    assert_eq!(json, ev);
}

#[test]
fn ensemble_identities() {
    let (ck, samples, _) = untrained(1);
    let single = Ensemble::new(vec![ck.clone()], Some(vec![1.0])).unwrap();
    let twice = Ensemble::new(vec![ck.clone(), ck.clone()], Some(vec![0.3, 2.0])).unwrap();
    for s in samples.iter().take(6) {
        let p = ck.model.predict(&s.tree).unwrap().probabilities;
        let e1 = single.probabilities(&s.tree).unwrap();
        let e2 = twice.probabilities(&s.tree).unwrap();
        assert!(common::max_abs_diff(&p, &e1) < 1e-15);
        assert!(common::max_abs_diff(&p, &e2) < 1e-12);
    }
    let default = Ensemble::new(vec![ck.clone(), untrained(2).0], None).unwrap();
    assert_eq!(default.weights(), &[0.5, 0.5]);
}

#[test]
fn ensemble_rejects_incompatible_members() {
    let (a, _, _) = untrained(1);
    let mut b = untrained(2).0;
    b.class_names[0] = "renamed".into();
    assert!(Ensemble::new(vec![a.clone(), b], None).is_err());
    assert!(Ensemble::new(vec![a.clone()], Some(vec![-1.0])).is_err());
    assert!(Ensemble::new(vec![a.clone()], Some(vec![0.0])).is_err());
    assert!(Ensemble::new(vec![a], Some(vec![1.0, 1.0])).is_err());
    assert!(Ensemble::new(vec![], None).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let (ck, samples, _) = untrained(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    for s in samples.iter().take(5) {
        let (a, b) = (
            ck.model.predict(&s.tree).unwrap(),
            back.model.predict(&s.tree).unwrap(),
        );
        assert_eq!(a, b);
    }
}

#[test]
fn ablated_corpus_stays_near_chance() {
    let spec = SyntheticSpec::six_class().ablated();
    let samples = generate_synthetic_corpus(&spec, 30, 42).unwrap();
    let names = spec.class_names();
    let s = split(&samples, [0.6, 0.2, 0.2], 1).unwrap();
    let vocab = Vocabulary::build(&s.train);
    let cfg = TrainConfig {
        epochs: 8,
        ..tiny_config()
    };
    let out = train(&s.train, &s.validation, &vocab, &names, &cfg, None).unwrap();
    let ev = evaluate(&out.checkpoint.model, &s.test, &names).unwrap();
    assert!(ev.accuracy < 0.35, "{}", ev.accuracy);
}
