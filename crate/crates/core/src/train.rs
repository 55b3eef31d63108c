//! SGD training of substitutes and victims: standard, adversarial and LGV.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{run_attack, AttackError, AttackSpec, InitKind, Norm};
use crate::engine::{EngineError, Tape, Tensor};
use crate::harness::dataset::Dataset;
use crate::harness::preprocess;
use crate::harness::HarnessError;
use crate::models::{build_model, cross_entropy_per_example, Model, ModelError, ModelSpec, TrainMeta};
use crate::rng::{self, domain, key_digest};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr · gamma^(epoch / every)`.
    StepDecay { lr: f64, gamma: f64, every: usize },
}

impl LrSchedule {
    pub fn base(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } | LrSchedule::StepDecay { lr, .. } => lr,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay { lr, gamma, every } => lr * gamma.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgvConfig {
    /// Defaults to ten times the last learning rate of the schedule.
    #[serde(default)]
    pub high_lr: Option<f64>,
    #[serde(default = "default_snapshots")]
    pub n_snapshots: usize,
    /// SGD steps between snapshots; defaults to half an epoch.
    #[serde(default)]
    pub snapshot_interval: Option<usize>,
}

fn default_snapshots() -> usize {
    8
}

impl Default for LgvConfig {
    fn default() -> Self {
        Self { high_lr: None, n_snapshots: default_snapshots(), snapshot_interval: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Inner attack for adversarial training.
    #[serde(default)]
    pub adversarial: Option<AttackSpec>,
    /// Epochs over which the inner ε and α ramp linearly from 0 (epoch 0 trains on clean data).
    #[serde(default)]
    pub adversarial_warmup: usize,
    /// Stop after the first epoch whose clean test accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    #[serde(default)]
    pub lgv: Option<LgvConfig>,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            lr: LrSchedule::StepDecay { lr: 0.02, gamma: 0.3, every: 8 },
            momentum: default_momentum(),
            weight_decay: 5e-4,
            seed: 0,
            adversarial: None,
            adversarial_warmup: 0,
            target_accuracy: None,
            lgv: None,
        }
    }
}

/// Five-step ℓ∞ PGD at ε = 8/255 with α = 2/255.
pub fn default_inner_attack() -> AttackSpec {
    AttackSpec {
        epsilon: 8.0 / 255.0,
        step_size: 2.0 / 255.0,
        iterations: 5,
        init: InitKind::UniformRandom,
        ..AttackSpec::linf()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.lr.base().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("learning rate must be positive");
        }
        if let Some(a) = &self.adversarial {
            if a.norm != Norm::Inf {
                return bad("adversarial inner attack must use the l-infinity norm");
            }
            if a.iterations > 10 {
                return bad("adversarial inner attack is limited to 10 iterations");
            }
            if a.method.is_some() || !a.augment.is_empty() {
                return bad("adversarial inner attack must be plain PGD");
            }
            if a.epsilon > 0.0 {
                AttackSpec { seed: 0, ..a.clone() }.validate()?;
            }
        }
        Ok(())
    }
}

/// Resizes canvas images to the model's input size.
pub fn model_view(model_spec: &ModelSpec, images: &Tensor) -> Result<Tensor, HarnessError> {
    let s = model_spec.input_size;
    let shape = images.shape();
    if shape[2] == s.height && shape[3] == s.width {
        return Ok(images.clone());
    }
    preprocess::resize(images, s.height, s.width)
}

/// Fraction of `data` classified correctly after resizing to the model input.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = model.classify(&model_view(model.spec(), &data.images)?)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

const GRAD_CHUNK: usize = 16;

/// Mean CE over the batch and its parameter gradient.
fn batch_gradient(model: &Model, x: &Tensor, y: &[usize]) -> Result<(f64, Vec<Tensor>), TrainError> {
    let n = y.len();
    let per = x.numel() / n;
    let starts: Vec<usize> = (0..n).step_by(GRAD_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| -> Result<(f64, Vec<Tensor>), TrainError> {
            let e = (s + GRAD_CHUNK).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = e - s;
            let xc = Tensor::new(shape, x.data()[s * per..e * per].to_vec())?;
            let mut tape = Tape::new();
            let xv = tape.constant(xc)?;
            let f = model.forward(&mut tape, xv, crate::models::ForwardOptions { trainable: true, block_logits: false })?;
            let ce = cross_entropy_per_example(&mut tape, f.logits, &y[s..e])?;
            let total = tape.sum(ce)?;
            let loss = tape.scale(total, 1.0 / n as f64)?;
            let value = tape.value(loss).item();
            let mut grads = tape.backward_scalar(loss)?;
            let g = f
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            Ok((value, g))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut acc) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            for (u, v) in a.data_mut().iter_mut().zip(b.data()) {
                *u += v;
            }
        }
    }
    Ok((loss, acc))
}

struct Sgd {
    velocity: Vec<Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self { velocity: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(), momentum, weight_decay }
    }

    fn step(&mut self, model: &Model, grads: &[Tensor], lr: f64) -> Result<Model, TrainError> {
        let mut params = model.params().to_vec();
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
        Ok(model.with_params(params)?)
    }
}

fn shuffled(n: usize, keys: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(keys));
    idx
}

/// Replaces a canvas minibatch by inner-attack examples against `model`.
fn adversarial_batch(model: &Model, x: &Tensor, y: &[usize], inner: &AttackSpec, seed: u64) -> Result<Tensor, TrainError> {
    if inner.epsilon <= 0.0 {
        return Ok(x.clone());
    }
    let spec = AttackSpec { seed, ..inner.clone() };
    Ok(run_attack(std::slice::from_ref(model), x, y, &spec)?.x_adv)
}

/// One pass of SGD over `data`; calls `after_step` with the running step count.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    mut model: Model,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
    order_keys: &[u64],
    step: &mut usize,
    mut after_step: impl FnMut(&Model, usize),
) -> Result<Model, TrainError> {
    let order = shuffled(data.len(), order_keys);
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let batch = data.subset(idx);
        let mut x = batch.images;
        if let Some(inner) = &cfg.adversarial {
            let ramp = if epoch < cfg.adversarial_warmup { epoch as f64 / cfg.adversarial_warmup as f64 } else { 1.0 };
            let inner = AttackSpec { epsilon: inner.epsilon * ramp, step_size: inner.step_size * ramp, ..inner.clone() };
            let seed = key_digest(&[cfg.seed, domain::TRAIN_ATTACK, epoch as u64, b as u64]);
            x = adversarial_batch(&model, &x, &batch.labels, &inner, seed)?;
        }
        let x = model_view(model.spec(), &x)?;
        let (loss, grads) = batch_gradient(&model, &x, &batch.labels)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged { epoch, step: *step, loss });
        }
        model = opt.step(&model, &grads, lr)?;
        *step += 1;
        after_step(&model, *step);
    }
    Ok(model)
}

/// Returns the trained model and the number of epochs run.
fn fit(model: Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<(Model, usize), TrainError> {
    cfg.validate()?;
    let mut opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut step = 0;
    let mut model = model;
    for epoch in 0..cfg.epochs {
        let keys = [cfg.seed, domain::SHUFFLE, epoch as u64];
        model = run_epoch(model, &mut opt, train, cfg, epoch, cfg.lr.at(epoch), &keys, &mut step, |_, _| {})?;
        if cfg.target_accuracy.is_some_and(|t| accuracy(&model, test).is_ok_and(|a| a >= t)) {
            return Ok((model, epoch + 1));
        }
    }
    Ok((model, cfg.epochs))
}

/// Standard (or, when `cfg.adversarial` is set, adversarial) training from a
/// fresh initialization; records clean accuracy on `test`.
pub fn train(spec: &ModelSpec, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<Model, TrainError> {
    let init = build_model(spec, cfg.seed)?;
    let (model, epochs) = fit(init, train, test, cfg)?;
    let mut meta = TrainMeta {
        seed: cfg.seed,
        epochs,
        clean_test_accuracy: Some(accuracy(&model, test)?),
        robust_accuracy: None,
        kind: "standard".into(),
    };
    if let Some(inner) = &cfg.adversarial {
        meta.kind = "adversarial".into();
        let seed = key_digest(&[cfg.seed, domain::TRAIN_ATTACK, u64::MAX]);
        let x_adv = adversarial_batch(&model, &test.images, &test.labels, inner, seed)?;
        let adv = Dataset { images: x_adv, labels: test.labels.clone(), classes: test.classes };
        meta.robust_accuracy = Some(accuracy(&model, &adv)?);
    }
    Ok(model.with_meta(meta))
}

/// [`train`] with the inner attack on; defaults to [`default_inner_attack`].
pub fn adversarial_train(spec: &ModelSpec, data: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<Model, TrainError> {
    let mut cfg = cfg.clone();
    cfg.adversarial.get_or_insert_with(default_inner_attack);
    train(spec, data, test, &cfg)
}

/// Continues SGD from `base` at the high learning rate and returns
/// `n_snapshots` models taken every `snapshot_interval` steps.
pub fn collect_lgv(base: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<Model>, TrainError> {
    cfg.validate()?;
    let lgv = cfg.lgv.clone().unwrap_or_default();
    if lgv.n_snapshots == 0 {
        return Ok(Vec::new());
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let interval = lgv.snapshot_interval.unwrap_or((steps_per_epoch / 2).max(1)).max(1);
    let lr = lgv.high_lr.unwrap_or(10.0 * cfg.lr.at(cfg.epochs - 1));
    let plain = TrainConfig { adversarial: None, ..cfg.clone() };
    let mut opt = Sgd::new(base, cfg.momentum, cfg.weight_decay);
    let mut snapshots = Vec::with_capacity(lgv.n_snapshots);
    let mut model = base.clone();
    let mut step = 0;
    let mut epoch = 0;
    while snapshots.len() < lgv.n_snapshots {
        let keys = [cfg.seed, domain::SHUFFLE, epoch as u64, u64::MAX];
        model = run_epoch(model, &mut opt, data, &plain, epoch, lr, &keys, &mut step, |m, s| {
            if s % interval == 0 && snapshots.len() < lgv.n_snapshots {
                let meta = TrainMeta { epochs: base.meta().epochs + epoch + 1, kind: "lgv".into(), ..base.meta().clone() };
                snapshots.push(m.clone().with_meta(meta));
            }
        })?;
        epoch += 1;
    }
    Ok(snapshots)
}
