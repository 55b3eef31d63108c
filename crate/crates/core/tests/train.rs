mod common;

use common::bench;
use common::trained::{quick_cnn, quick_config, small_data, small_spec};
use rand::Rng;
use tabench::attack::{run_attack, AttackSpec};
use tabench::engine::Tensor;
use tabench::harness::{evaluate, Dataset, Pipeline};
use tabench::models::{load_checkpoint, save_checkpoint, ArchKind};
use tabench::rng;
use tabench::train::{
    accuracy, adversarial_train, collect_lgv, default_inner_attack, train, LgvConfig, LrSchedule, TrainConfig, TrainError,
};

#[test]
fn same_seed_gives_byte_identical_checkpoints() {
    let (tr, te) = small_data(1);
    let dir = tempfile::tempdir().unwrap();
    let bytes: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let m = train(&small_spec(ArchKind::ToyResnet), &tr, &te, &quick_config(4, 2)).unwrap();
            let p = dir.path().join(format!("{i}.tabx"));
            save_checkpoint(&m, &p).unwrap();
            std::fs::read(p).unwrap()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);
    let other = train(&small_spec(ArchKind::ToyResnet), &tr, &te, &quick_config(5, 2)).unwrap();
    assert_ne!(load_checkpoint(dir.path().join("0.tabx")).unwrap().flat_weights(), other.flat_weights());
}

#[test]
fn zero_budget_adversarial_training_is_standard_training() {
    let (tr, te) = small_data(2);
    let spec = small_spec(ArchKind::ToyCnn);
    let plain = train(&spec, &tr, &te, &quick_config(3, 2)).unwrap();
    let cfg = TrainConfig { adversarial: Some(AttackSpec { epsilon: 0.0, ..default_inner_attack() }), ..quick_config(3, 2) };
    let adv = adversarial_train(&spec, &tr, &te, &cfg).unwrap();
    assert_eq!(plain.flat_weights(), adv.flat_weights());
    assert_eq!(adv.meta().kind, "adversarial");
}

/// Dark versus bright images: separable by mean intensity.
fn two_class(n: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(&[0x2C, seed]);
    let per = 3 * 16 * 16;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let data = labels
        .iter()
        .flat_map(|&c| {
            let level = if c == 0 { 0.25 } else { 0.75 };
            (0..per).map(|_| level + r.gen_range(-0.2..0.2)).collect::<Vec<f64>>()
        })
        .collect();
    Dataset { images: Tensor::new(vec![n, 3, 16, 16], data).unwrap(), labels, classes: 2 }
}

#[test]
fn separable_two_class_set_is_learned() {
    let spec = small_spec(ArchKind::ToyCnn).with_classes(2);
    let m = train(&spec, &two_class(128, 0), &two_class(200, 1), &quick_config(0, 20)).unwrap();
    assert!(m.meta().clean_test_accuracy.unwrap() >= 0.99, "{:?}", m.meta());
}

#[test]
fn default_toy_cnn_reaches_ninety_percent() {
    let acc = bench::substitute(0).meta().clean_test_accuracy.unwrap();
    assert!(acc >= 0.90, "{acc}");
}

#[test]
fn divergence_is_reported() {
    let (tr, te) = small_data(3);
    let cfg = TrainConfig { lr: LrSchedule::Constant { lr: 1e6 }, momentum: 0.0, ..quick_config(0, 3) };
    match train(&small_spec(ArchKind::ToyCnn), &tr, &te, &cfg) {
        Err(TrainError::Diverged { loss, .. }) => assert!(!loss.is_finite() || loss > 1e3),
        other => panic!("expected divergence, got {:?}", other.map(|m| m.meta().clone())),
    }
    assert!(matches!(train(&small_spec(ArchKind::ToyCnn), &tr, &te, &quick_config(0, 0)), Err(TrainError::Config(_))));
}

#[test]
fn robust_training_resists_white_box_attack() {
    let mut gains = Vec::new();
    for seed in 0..3 {
        let robust = bench::robust_cnn(seed);
        let target = robust.meta().clean_test_accuracy.unwrap();
        let standard = bench::matched_cnn(seed, target);
        assert!((standard.meta().clean_test_accuracy.unwrap() - target).abs() <= 0.05, "seed {seed}");
        let x = bench::splits().test.range(0, 256);
        let white = |m: &tabench::models::Model| {
            let out = run_attack(std::slice::from_ref(m), &x.images, &x.labels, &AttackSpec { seed, ..AttackSpec::linf() })
                .unwrap();
            accuracy(m, &Dataset { images: out.x_adv, ..x.clone() }).unwrap()
        };
        gains.push(white(&robust) - white(&standard));
    }
    let mean = gains.iter().sum::<f64>() / 3.0;
    assert!(mean >= 0.10, "robust gain {mean} from {gains:?}");
}

#[test]
fn lgv_snapshots() {
    let (base, _) = quick_cnn(6);
    let (tr, _) = small_data(6);
    let cfg = |n| TrainConfig {
        lgv: Some(LgvConfig { high_lr: None, n_snapshots: n, snapshot_interval: Some(3) }),
        ..quick_config(9, 6)
    };
    assert!(collect_lgv(&base, &tr, &cfg(0)).unwrap().is_empty());
    let snaps = collect_lgv(&base, &tr, &cfg(4)).unwrap();
    assert_eq!(snaps.len(), 4);
    let weights: Vec<Vec<f64>> = snaps.iter().map(|m| m.flat_weights()).collect();
    for i in 0..4 {
        assert_ne!(weights[i], base.flat_weights());
        for j in i + 1..4 {
            assert_ne!(weights[i], weights[j]);
        }
    }
}

#[test]
#[ignore = "does not reproduce at desk scale: LGV ensembles transfer no better than the base toy_cnn (see the decisions ledger)"]
fn lgv_ensemble_transfers_better_than_its_base() {
    let mut gaps = Vec::new();
    for seed in 0..3 {
        let base = bench::substitute(seed);
        let cfg = TrainConfig { seed: seed + 11, lgv: Some(LgvConfig::default()), ..Default::default() };
        let snaps = collect_lgv(&base, &bench::splits().train, &cfg).unwrap();
        let victims = [bench::victim("v", bench::resnet_victim(seed), Pipeline::resize(32))];
        let x = bench::splits().test.range(0, 256);
        let acc = |subs: &[tabench::models::Model]| {
            let out = run_attack(subs, &x.images, &x.labels, &AttackSpec { seed, ..AttackSpec::linf() }).unwrap();
            evaluate(&out.x_adv, &x.labels, "sub", &victims).unwrap()[0].accuracy
        };
        gaps.push(acc(std::slice::from_ref(&base)) - acc(&snaps));
    }
    assert!(gaps.iter().sum::<f64>() / 3.0 >= 0.03, "{gaps:?}");
}

#[test]
fn transfer_never_beats_clean_accuracy_on_benign_rows() {
    let (sub, te) = quick_cnn(7);
    let (tr, _) = small_data(7);
    let vic = train(&small_spec(ArchKind::ToyResnet), &tr, &te, &quick_config(8, 4)).unwrap();
    let victims = [bench::victim("v", vic, Pipeline::default())];
    let clean = evaluate(&te.images, &te.labels, "sub", &victims).unwrap()[0].accuracy;
    let out = run_attack(std::slice::from_ref(&sub), &te.images, &te.labels, &AttackSpec { iterations: 20, ..AttackSpec::linf() })
        .unwrap();
    let adv = evaluate(&out.x_adv, &te.labels, "sub", &victims).unwrap()[0].accuracy;
    assert!(adv <= clean, "{adv} > {clean}");
}
