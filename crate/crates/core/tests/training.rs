//! Training loop contracts on small networks.

use ocean_core::gradsuite::tiny_net;
use ocean_core::harness::train::{is_backbone, overfit_single_pair, sample_pair, train, TrainConfig, Trainer};
use ocean_core::network::{ModelParams, NetConfig};
use ocean_core::{Error, Real};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 2, pairs_per_epoch: 12, batch_size: 4, seed, ..TrainConfig::default() }
}

#[test]
fn overfitting_one_pair_halves_the_loss() {
    let cfg = TrainConfig::default();
    let h = overfit_single_pair(&cfg, &NetConfig::default(), 200).unwrap();
    let (at10, last) = (h[9].total, h[199].total);
    assert!(last <= 0.5 * at10, "loss {} at step 10, {} at step 200", at10, last);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let net = tiny_net();
    let cfg = small(1);
    let params = ModelParams::init(&net, 1).unwrap();
    let mut trainer = Trainer::new(net.clone(), params.clone(), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<_> = (0..3).map(|_| sample_pair(&mut rng, &cfg, &net).unwrap()).collect();
    for _ in 0..3 {
        trainer.step(&batch, 0.0, false).unwrap();
    }
    assert_eq!(trainer.params, params);
}

#[test]
fn same_seed_same_history() {
    let net = tiny_net();
    let a = train(&small(4), &net).unwrap();
    let b = train(&small(4), &net).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert_eq!(a.history.len(), 6);
    let c = train(&small(5), &net).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn frozen_epochs_leave_the_backbone_alone() {
    let net = tiny_net();
    let cfg = TrainConfig { epochs: 1, freeze_backbone_epochs: 1, ..small(6) };
    let init = ModelParams::init(&net, 6).unwrap();
    let out = train(&cfg, &net).unwrap();
    for (name, t) in out.params.iter() {
        let before = init.get(name).unwrap();
        if is_backbone(name) {
            assert_eq!(t, before, "{} moved while frozen", name);
        }
    }
    assert!(out.params.iter().any(|(n, t)| !is_backbone(n) && t != init.get(n).unwrap()));
}

#[test]
fn divergence_aborts_with_the_last_good_parameters() {
    let net = tiny_net();
    let cfg = TrainConfig { warmup_lr: 1e12, peak_lr: 1e12, final_lr: 1e12, freeze_backbone_epochs: 0, ..small(7) };
    let abort = train(&cfg, &net).unwrap_err();
    assert!(matches!(abort.error, Error::Numeric(_)), "{:?}", abort.error);
    assert!(abort.last_good.iter().all(|(_, t)| t.is_finite()));
    assert!(abort.history.iter().all(|r| r.total.is_finite()));
}

#[test]
fn invalid_configs_are_rejected() {
    let net = tiny_net();
    assert!(train(&TrainConfig { batch_size: 0, ..small(0) }, &net).is_err());
    assert!(TrainConfig { momentum: 1.5, ..small(0) }.validate().is_err());
}

proptest! {
    #[test]
    fn schedule_never_increases_after_warmup(
        epochs in 1usize..30, freeze in 0usize..5, peak in 1e-4..1e-1f64, floor in 1e-7..1e-4f64,
    ) {
        let cfg = TrainConfig {
            epochs, freeze_backbone_epochs: freeze, peak_lr: peak as Real, final_lr: floor as Real, ..TrainConfig::default()
        };
        for e in freeze..epochs.saturating_sub(1) {
            prop_assert!(cfg.learning_rate(e + 1) <= cfg.learning_rate(e));
        }
        if epochs > freeze {
            prop_assert!((cfg.learning_rate(freeze) - peak as Real).abs() <= 1e-15);
        }
    }
}
