//! Desk-scale benchmark fixtures: default data, trained substitutes and victims.
//!
//! Trained checkpoints are cached under the cargo target temp dir, keyed by a
//! digest of everything that determines the weights.

use std::path::PathBuf;
use std::sync::OnceLock;

use serde::Serialize;
use tabench::attack::{run_attack, AttackSpec};
use tabench::harness::{evaluate, DatasetConfig, Pipeline, Splits, Victim, VictimEntry};
use tabench::models::{load_checkpoint, save_checkpoint, ArchKind, Model, ModelSpec};
use tabench::rng::key_digest;
use tabench::train::{accuracy, default_inner_attack, train, LrSchedule, TrainConfig};

/// Bump when training code changes in a way that alters weights.
const REVISION: u64 = 1;

pub fn splits() -> &'static Splits {
    static S: OnceLock<Splits> = OnceLock::new();
    S.get_or_init(|| DatasetConfig::default().generate())
}

fn digest(value: &impl Serialize) -> u64 {
    let mut bytes = serde_json::to_vec(value).unwrap();
    bytes.resize(bytes.len().div_ceil(8) * 8, 0);
    let mut words: Vec<u64> = bytes.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    words.push(REVISION);
    key_digest(&words)
}

fn cache_path(name: &str, key: u64) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("tabench-models");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(format!("{name}-{key:016x}.tabx"))
}

/// Trains `spec` with `cfg` on the default training split, or loads the cached result.
pub fn trained(name: &str, spec: &ModelSpec, cfg: &TrainConfig) -> Model {
    let path = cache_path(name, digest(&(spec, cfg, DatasetConfig::default())));
    if let Ok(m) = load_checkpoint(&path) {
        return m;
    }
    let s = splits();
    let m = train(spec, &s.train, &s.test, cfg).unwrap();
    let tmp = path.with_extension(format!("{}.part", std::process::id()));
    save_checkpoint(&m, &tmp).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    m
}

pub fn cnn_spec() -> ModelSpec {
    ModelSpec::new(ArchKind::ToyCnn).with_width(8).with_depth(3)
}

pub fn substitute(seed: u64) -> Model {
    let cfg = TrainConfig { epochs: 10, seed, lr: LrSchedule::StepDecay { lr: 0.02, gamma: 0.3, every: 7 }, ..Default::default() };
    trained("sub", &cnn_spec(), &cfg)
}

pub fn resnet_victim(seed: u64) -> Model {
    let spec = ModelSpec::new(ArchKind::ToyResnet).with_width(8).with_depth(2);
    let cfg = TrainConfig {
        epochs: 14,
        seed: seed + 100,
        lr: LrSchedule::StepDecay { lr: 0.02, gamma: 0.3, every: 9 },
        ..Default::default()
    };
    trained("resnet", &spec, &cfg)
}

/// PGD-trained toy_cnn (ε = 8/255, α = ε/4, three warm-up epochs).
pub fn robust_cnn(seed: u64) -> Model {
    let eps = 8.0 / 255.0;
    let cfg = TrainConfig {
        epochs: 8,
        seed,
        lr: LrSchedule::StepDecay { lr: 0.02, gamma: 0.3, every: 5 },
        adversarial: Some(AttackSpec { epsilon: eps, step_size: eps / 4.0, ..default_inner_attack() }),
        adversarial_warmup: 3,
        ..Default::default()
    };
    trained("robust", &cnn_spec(), &cfg)
}

/// Standard toy_cnn stopped at the first epoch reaching `target` clean accuracy.
pub fn matched_cnn(seed: u64, target: f64) -> Model {
    let cfg = TrainConfig {
        epochs: 12,
        seed: seed + 7,
        lr: LrSchedule::Constant { lr: 0.005 },
        target_accuracy: Some(target),
        ..Default::default()
    };
    trained("matched", &cnn_spec(), &cfg)
}

pub fn victim(name: &str, model: Model, pipeline: Pipeline) -> Victim {
    let size = model.spec().input_size.height;
    Victim::new(VictimEntry::new(name, "", pipeline, size), model).unwrap()
}

/// Substitute accuracy on its own I-FGSM examples from the first 256 test images.
pub fn white_box_accuracy(seed: u64) -> f64 {
    let sub = substitute(seed);
    let x = splits().test.range(0, 256);
    let out = run_attack(std::slice::from_ref(&sub), &x.images, &x.labels, &AttackSpec { seed, ..AttackSpec::linf() })
        .unwrap();
    let adv = tabench::harness::Dataset { images: out.x_adv, ..x };
    accuracy(&sub, &adv).unwrap()
}

/// Victim accuracy on transfer examples crafted from the 256-image test slice.
pub fn transfer_accuracy(sub: &Model, spec: &AttackSpec, victims: &[Victim]) -> Vec<f64> {
    let x = splits().test.range(0, 256);
    let out = run_attack(std::slice::from_ref(sub), &x.images, &x.labels, spec).unwrap();
    evaluate(&out.x_adv, &x.labels, "sub", victims).unwrap().iter().map(|c| c.accuracy).collect()
}
