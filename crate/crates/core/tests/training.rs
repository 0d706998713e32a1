//! Behaviour of the alternating trainer on small synthetic pairs.

use adagcn::data::{generate_pair, with_label_rates, SyntheticConfig};
use adagcn::graph::DomainPair;
use adagcn::model::{init_params, TaskMode, Variant};
use adagcn::trainer::{evaluate_target, train, TrainConfig, Trainer};
use adagcn::Error;

fn small_pair(seed: u64, overlap: f64, target_rate: f64) -> DomainPair {
    let cfg = SyntheticConfig {
        nodes: 150,
        p_in: 0.1,
        p_out: 0.005,
        overlap,
        seed,
        ..SyntheticConfig::default()
    };
    with_label_rates(&generate_pair(&cfg).unwrap(), 0.2, target_rate, seed).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        widths: vec![24, 8],
        critic_steps: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn classification_loss_falls_on_the_default_pair() {
    let pair = generate_pair(&SyntheticConfig::default()).unwrap();
    let pair = with_label_rates(&pair, 0.1, 0.0, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        widths: vec![64, 32, 16],
        ..TrainConfig::default()
    };
    let (_, history) = train(&pair, &cfg).unwrap();
    let first = history.epochs[0].losses.classification;
    let last = history.epochs[199].losses.classification;
    assert!(last < first, "L_c {first} -> {last}");
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let pair = small_pair(1, 0.0, 0.0);
    let cfg = quick(0);
    let (params, history) = train(&pair, &cfg).unwrap();
    assert!(history.is_empty());
    let arch = cfg.architecture(pair.attribute_count(), pair.label_count());
    assert_eq!(params, init_params(&arch, cfg.seed).unwrap());
}

#[test]
fn critic_updates_never_reach_the_generator() {
    // Without the adversarial term the critic is the only thing n_d changes,
    // so generator and classifier trajectories must not depend on it.
    let pair = small_pair(2, 0.0, 0.0);
    let base = TrainConfig {
        lambda: 0.0,
        ..quick(15)
    };
    let (a, ha) = train(
        &pair,
        &TrainConfig {
            critic_steps: 0,
            ..base.clone()
        },
    )
    .unwrap();
    let (b, hb) = train(
        &pair,
        &TrainConfig {
            critic_steps: 4,
            ..base
        },
    )
    .unwrap();
    assert_eq!(a.generator, b.generator);
    assert_eq!(a.classifier, b.classifier);
    assert_ne!(a.critic, b.critic);
    let lc = |h: &adagcn::trainer::TrainHistory| -> Vec<u64> {
        h.epochs
            .iter()
            .map(|r| r.losses.classification.to_bits())
            .collect()
    };
    assert_eq!(lc(&ha), lc(&hb));
}

#[test]
fn generator_updates_never_reach_the_critic() {
    let pair = small_pair(3, 0.0, 0.0);
    let cfg = TrainConfig {
        critic_steps: 0,
        weight_decay: 0.1,
        ..quick(10)
    };
    let (params, _) = train(&pair, &cfg).unwrap();
    let arch = cfg.architecture(pair.attribute_count(), pair.label_count());
    let init = init_params(&arch, cfg.seed).unwrap();
    assert_eq!(params.critic, init.critic);
    assert_ne!(params.generator, init.generator);
}

#[test]
fn training_is_reproducible_and_seed_dependent() {
    let pair = small_pair(4, 0.2, 0.0);
    let cfg = quick(8);
    let (a, ha) = train(&pair, &cfg).unwrap();
    let (b, hb) = train(&pair, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha.jsonl(), hb.jsonl());
    let (c, _) = train(&pair, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn snapshots_match_scoring_the_final_parameters() {
    let pair = small_pair(5, 0.0, 0.0);
    let mut trainer = Trainer::new(&pair, &quick(12)).unwrap().with_evaluation(4);
    trainer.run().unwrap();
    let with_snapshot: Vec<usize> = trainer
        .history()
        .epochs
        .iter()
        .filter(|r| r.snapshot.is_some())
        .map(|r| r.epoch)
        .collect();
    assert_eq!(with_snapshot, vec![3, 7, 11]);
    let last = trainer.history().last_snapshot().unwrap();
    let direct = evaluate_target(trainer.params(), &pair).unwrap().unwrap();
    assert_eq!(last, direct);
}

#[test]
fn every_epoch_record_is_finite_and_ordered() {
    let pair = small_pair(6, 0.0, 0.1);
    let (_, history) = train(&pair, &quick(10)).unwrap();
    for (i, r) in history.epochs.iter().enumerate() {
        assert_eq!(r.epoch, i);
        let l = r.losses;
        assert!([
            l.classification,
            l.critic,
            l.gradient_penalty,
            l.weight_decay
        ]
        .iter()
        .all(|v| v.is_finite()));
        assert!(l.gradient_penalty >= 0.0 && l.weight_decay >= 0.0);
    }
    assert_eq!(history.jsonl().lines().count(), 10);
}

#[test]
fn igcn_and_multi_class_train() {
    let pair = small_pair(7, 0.0, 0.0);
    let cfg = TrainConfig {
        variant: Variant::Igcn,
        smoothing: 4,
        mode: TaskMode::MultiClass,
        ..quick(20)
    };
    let (params, history) = train(&pair, &cfg).unwrap();
    assert!(history.epochs[19].losses.classification < history.epochs[0].losses.classification);
    let scores = evaluate_target(&params, &pair).unwrap().unwrap();
    assert!((0.0..=1.0).contains(&scores.micro_f1));
}

#[test]
fn multi_class_rejects_nodes_with_two_labels() {
    let pair = small_pair(8, 0.5, 0.0);
    let cfg = TrainConfig {
        mode: TaskMode::MultiClass,
        ..quick(1)
    };
    assert!(matches!(
        Trainer::new(&pair, &cfg),
        Err(Error::Data(_)) | Err(Error::Config(_))
    ));
}

#[test]
fn unlabeled_source_is_rejected() {
    let pair = small_pair(9, 0.0, 0.0);
    let pair = pair.with_labeled_sets(Vec::new(), Vec::new()).unwrap();
    assert!(Trainer::new(&pair, &quick(1)).is_err());
}

#[test]
fn divergence_keeps_the_last_good_parameters() {
    let pair = small_pair(10, 0.0, 0.0);
    let cfg = TrainConfig {
        generator_lr: 1e300,
        critic_lr: 1e300,
        ..quick(50)
    };
    let mut trainer = Trainer::new(&pair, &cfg).unwrap();
    let mut before = trainer.params().clone();
    let err = loop {
        match trainer.run_epoch() {
            Ok(_) => before = trainer.params().clone(),
            Err(e) => break e,
        }
    };
    assert!(matches!(err, Error::Training { .. }), "{err}");
    assert_eq!(trainer.params(), &before);
    assert!(trainer.epochs_done() < 50);
}

#[test]
fn invalid_settings_are_rejected_before_training() {
    let pair = small_pair(11, 0.0, 0.0);
    for cfg in [
        TrainConfig {
            lambda: -1.0,
            ..quick(1)
        },
        TrainConfig {
            dropout: 1.0,
            ..quick(1)
        },
        TrainConfig {
            widths: vec![],
            ..quick(1)
        },
        TrainConfig {
            critic_lr: 0.0,
            ..quick(1)
        },
    ] {
        assert!(matches!(Trainer::new(&pair, &cfg), Err(Error::Config(_))));
    }
}
