//! Toy classifiers standing in for the CNN / ResNet / ViT / Mixer families.

mod arch;
mod checkpoint;
mod spec;

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, CheckpointHeader, TrainMeta};
pub use spec::{ArchKind, InputSize, ModelSpec};

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{EngineError, Tape, Tensor, Var};
use crate::rng::{self, domain};
use spec::Init;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input size mismatch: model expects {expected:?}, got {got:?}")]
    InputSize { expected: Vec<usize>, got: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("weight blob has {blob} values but the spec implies {expected}")]
    BlobLength { blob: usize, expected: usize },
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Immutable model: spec, training metadata and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    meta: TrainMeta,
    params: Vec<Tensor>,
}

/// Vars produced by [`Model::forward`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Bound parameter vars, in layout order.
    pub params: Vec<Var>,
    /// Per-block class-token logits through the shared head (toy_vit only).
    pub block_logits: Vec<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Bind weights as differentiable leaves.
    pub trainable: bool,
    pub block_logits: bool,
}

/// Deterministic initialization: uniform in ±sqrt(6/fan_in), streams keyed by (seed, tensor index).
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    spec.validate()?;
    let params = spec
        .param_layout()
        .iter()
        .enumerate()
        .map(|(i, info)| {
            let n: usize = info.shape.iter().product();
            let data = match info.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut r = rng::stream(&[seed, domain::PARAM_INIT, i as u64]);
                    (0..n).map(|_| r.gen_range(-bound..bound)).collect()
                }
            };
            Tensor::new(info.shape.clone(), data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Model { spec: spec.clone(), meta: TrainMeta { seed, ..TrainMeta::default() }, params })
}

/// Examples per tape in batched inference.
pub const PREDICT_CHUNK: usize = 32;

impl Model {
    pub fn from_parts(spec: ModelSpec, meta: TrainMeta, params: Vec<Tensor>) -> Result<Self, ModelError> {
        spec.validate()?;
        let layout = spec.param_layout();
        let expected: usize = layout.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        let got: usize = params.iter().map(Tensor::numel).sum();
        if layout.len() != params.len() || layout.iter().zip(&params).any(|(l, p)| l.shape != p.shape()) {
            return Err(ModelError::BlobLength { blob: got, expected });
        }
        Ok(Self { spec, meta, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    pub fn with_meta(mut self, meta: TrainMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.spec.param_layout().into_iter().map(|p| p.name).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Flat weight blob in layout order.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self, ModelError> {
        Self::from_parts(self.spec.clone(), self.meta.clone(), params)
    }

    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        let s = self.spec.input_size;
        vec![n, s.channels, s.height, s.width]
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let n = shape.first().copied().unwrap_or(0);
        let expected = self.input_shape(n);
        if shape != expected.as_slice() || n == 0 {
            return Err(ModelError::InputSize { expected, got: shape.to_vec() });
        }
        Ok(())
    }

    /// Records the forward pass of `input` (`[N, 3, H, W]`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, input: Var, opts: ForwardOptions) -> Result<Forward, ModelError> {
        self.check_input(tape.shape(input))?;
        let params = self
            .params
            .iter()
            .map(|p| if opts.trainable { tape.input(p.clone()) } else { tape.constant(p.clone()) })
            .collect::<Result<Vec<_>, _>>()?;
        self.forward_bound(tape, input, params, opts.block_logits)
    }

    /// Forward pass with weights supplied as vars already on `tape`, in layout order.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        input: Var,
        params: Vec<Var>,
        block_logits: bool,
    ) -> Result<Forward, ModelError> {
        self.check_input(tape.shape(input))?;
        let layout = self.spec.param_layout();
        if layout.len() != params.len() || layout.iter().zip(&params).any(|(l, &p)| l.shape != tape.shape(p)) {
            return Err(ModelError::BlobLength {
                blob: params.iter().map(|&p| tape.value(p).numel()).sum(),
                expected: self.num_params(),
            });
        }
        let out = arch::forward(&self.spec, tape, input, &params, block_logits)?;
        Ok(Forward { logits: out.logits, params, block_logits: out.block_logits })
    }

    /// Logits for a batch, computed in fixed-size chunks.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(batch.shape())?;
        let n = batch.shape()[0];
        let per = batch.numel() / n;
        let chunks: Vec<(usize, usize)> =
            (0..n).step_by(PREDICT_CHUNK).map(|s| (s, (s + PREDICT_CHUNK).min(n))).collect();
        let parts = chunks
            .par_iter()
            .map(|&(s, e)| -> Result<Tensor, ModelError> {
                let mut shape = batch.shape().to_vec();
                shape[0] = e - s;
                let x = Tensor::new(shape, batch.data()[s * per..e * per].to_vec())?;
                let mut tape = Tape::new();
                let xv = tape.constant(x)?;
                let f = self.forward(&mut tape, xv, ForwardOptions::default())?;
                Ok(tape.value(f.logits).clone())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Tensor::stack_rows(&parts)?)
    }

    /// Arg-max class per row of [`Model::predict`].
    pub fn classify(&self, batch: &Tensor) -> Result<Vec<usize>, ModelError> {
        let logits = self.predict(batch)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Per-example `−log softmax(logits)[label]`, shape `[N]`.
pub fn cross_entropy_per_example(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, ModelError> {
    let k = tape.shape(logits)[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(ModelError::LabelRange { label, classes: k });
    }
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, labels)?;
    Ok(tape.scale(picked, -1.0)?)
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, ModelError> {
    let per = cross_entropy_per_example(tape, logits, labels)?;
    Ok(tape.mean(per)?)
}
