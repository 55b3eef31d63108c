//! Small trained models on the synthetic shapes data.

use tabench::harness::{gen_dataset, Dataset};
use tabench::models::{ArchKind, Model, ModelSpec};
use tabench::train::{train, LrSchedule, TrainConfig};

/// 4-class, 16×16 train/test split.
pub fn small_data(seed: u64) -> (Dataset, Dataset) {
    let all = gen_dataset(seed, 480, 4, 16);
    (all.range(0, 384), all.range(384, 480))
}

pub fn small_spec(arch: ArchKind) -> ModelSpec {
    ModelSpec::new(arch).with_input(16, 16).with_width(4).with_depth(2).with_classes(4)
}

pub fn quick_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 32, lr: LrSchedule::Constant { lr: 0.03 }, seed, ..TrainConfig::default() }
}

/// toy_cnn trained for a few epochs; a fraction of a second.
pub fn quick_cnn(seed: u64) -> (Model, Dataset) {
    let (tr, te) = small_data(seed);
    let m = train(&small_spec(ArchKind::ToyCnn), &tr, &te, &quick_config(seed, 6)).unwrap();
    (m, te)
}
