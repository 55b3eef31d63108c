//! Iterative perturbation optimizers and the attack loop.
//!
//! Perturbations live at the resolution of the images handed to
//! [`run_attack`]; the substitute-side bilinear resize to the model input is
//! part of the differentiated graph. Examples are processed in fixed chunks of
//! [`ATTACK_CHUNK`] rows, each with its own tapes, and every random draw is
//! keyed by (seed, example row, iteration), so results do not depend on the
//! number of worker threads.

use std::sync::atomic::AtomicUsize;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_stack, AugmentContext, AugmentError, AugmentKind, AugmentStack};
use crate::engine::{EngineError, HookRegistry, Tape, Tensor, Var};
use crate::methods::{self, Aggregates, MethodError, MethodKind, MethodParams};
use crate::models::{cross_entropy_per_example, ForwardOptions, Model, ModelError};
use crate::rng::{self, domain};

/// Rows per tape during an attack.
pub const ATTACK_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack spec: {0}")]
    InvalidSpec(String),
    #[error("no substitute model given")]
    NoSubstitute,
    #[error("batch has {images} images but {labels} labels")]
    Labels { images: usize, labels: usize },
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Method(#[from] MethodError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Inf,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zeros,
    UniformRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "MI")]
    Mi,
    #[serde(rename = "NI")]
    Ni,
    #[serde(rename = "PI")]
    Pi,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [OptimizerKind::Plain, OptimizerKind::Mi, OptimizerKind::Ni, OptimizerKind::Pi];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Plain => "plain",
            OptimizerKind::Mi => "MI",
            OptimizerKind::Ni => "NI",
            OptimizerKind::Pi => "PI",
        }
    }
}

fn default_momentum() -> f64 {
    1.0
}
fn default_backprops() -> usize {
    1
}

/// Full attack configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub init: InitKind,
    pub optimizer: OptimizerKind,
    /// μ for MI/NI/PI.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub augment: AugmentStack,
    #[serde(default)]
    pub method: Option<MethodParams>,
    #[serde(default = "default_backprops")]
    pub n_backprops_per_iter: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self::linf()
    }
}

impl AttackSpec {
    /// I-FGSM under ℓ∞: ε = 8/255, α = 1/255, 100 iterations.
    pub fn linf() -> Self {
        Self {
            norm: Norm::Inf,
            epsilon: 8.0 / 255.0,
            step_size: 1.0 / 255.0,
            iterations: 100,
            init: InitKind::Zeros,
            optimizer: OptimizerKind::Plain,
            momentum: 1.0,
            augment: AugmentStack::empty(),
            method: None,
            n_backprops_per_iter: 1,
            seed: 0,
        }
    }

    /// I-FGSM under ℓ₂: ε = 5, α = 1, 100 iterations.
    pub fn l2() -> Self {
        Self { norm: Norm::Two, epsilon: 5.0, step_size: 1.0, ..Self::linf() }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::InvalidSpec(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.n_backprops_per_iter == 0 {
            return bad("n_backprops_per_iter must be at least 1".into());
        }
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return bad(format!("momentum must be non-negative, got {}", self.momentum));
        }
        Ok(())
    }

    /// UN half-width for this norm on an `h×w` image.
    pub fn noise_amplitude(&self, h: usize, w: usize) -> f64 {
        match self.norm {
            Norm::Inf => self.epsilon,
            Norm::Two => self.epsilon / ((h * w) as f64).sqrt(),
        }
    }
}

/// Mean loss and gradient norm over the batch at each iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// An example whose loss or gradient went non-finite; its perturbation was frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleFailure {
    pub example: usize,
    pub iteration: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct AttackOutput {
    pub x_adv: Tensor,
    pub trace: Trace,
    pub failures: Vec<ExampleFailure>,
}

/// Extra inputs some configurations need.
#[derive(Clone, Debug, Default)]
pub struct AttackOptions<'a> {
    /// Held-out images for FDA channel statistics.
    pub stats: Option<&'a Tensor>,
    /// Incremented once per backward pass.
    pub backprop_counter: Option<Arc<AtomicUsize>>,
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Ball projection then box clamp, per example; bitwise idempotent.
pub fn project(delta: &mut Tensor, x: &Tensor, norm: Norm, epsilon: f64) {
    let n = x.shape()[0];
    let per = x.numel() / n;
    let xd = x.data();
    for (i, row) in delta.data_mut().chunks_mut(per).enumerate() {
        match norm {
            Norm::Inf => row.iter_mut().for_each(|v| *v = v.clamp(-epsilon, epsilon)),
            Norm::Two => {
                let norm = l2(row);
                if norm > epsilon * (1.0 + 1e-12) {
                    let s = epsilon / norm;
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        for (v, &xv) in row.iter_mut().zip(&xd[i * per..]) {
            if xv + *v > 1.0 {
                *v = 1.0 - xv;
            } else if xv + *v < 0.0 {
                *v = -xv;
            }
        }
    }
}

/// δ₀ for example `row`: zeros, or uniform in the ε-ball, then projected.
pub fn init_perturbation(spec: &AttackSpec, x: &Tensor, rows: &[usize]) -> Tensor {
    let n = x.shape()[0];
    let per = x.numel() / n;
    let mut delta = Tensor::zeros(x.shape());
    if spec.init == InitKind::UniformRandom {
        for (d, &row) in delta.data_mut().chunks_mut(per).zip(rows) {
            let mut r = rng::stream(&[spec.seed, domain::PERTURB_INIT, row as u64]);
            match spec.norm {
                Norm::Inf => d.iter_mut().for_each(|v| *v = r.gen_range(-spec.epsilon..=spec.epsilon)),
                Norm::Two => {
                    d.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
                    let norm = l2(d).max(1e-300);
                    let radius = spec.epsilon * r.gen::<f64>().powf(1.0 / per as f64);
                    d.iter_mut().for_each(|v| *v *= radius / norm);
                }
            }
        }
    }
    project(&mut delta, x, spec.norm, spec.epsilon);
    delta
}

/// Momentum and pre-gradient buffers, one row per example.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub momentum: Tensor,
    pub previous: Tensor,
}

impl OptimizerState {
    pub fn new(shape: &[usize]) -> Self {
        Self { momentum: Tensor::zeros(shape), previous: Tensor::zeros(shape) }
    }

    /// Point at which the gradient is taken for this optimizer.
    pub fn lookahead(&self, delta: &Tensor, spec: &AttackSpec) -> Tensor {
        match spec.optimizer {
            OptimizerKind::Plain | OptimizerKind::Mi => delta.clone(),
            OptimizerKind::Ni => {
                let c = spec.step_size * spec.momentum;
                delta.zip_map(&self.momentum, |d, g| d + c * g).expect("state shape")
            }
            OptimizerKind::Pi => delta.zip_map(&self.previous, |d, g| d + spec.step_size * g).expect("state shape"),
        }
    }

    /// Updates the state with `grad` and returns the δ increment.
    pub fn step(&mut self, grad: &Tensor, spec: &AttackSpec) -> Tensor {
        let n = grad.shape()[0];
        let per = grad.numel() / n;
        let mut dir = grad.clone();
        if spec.optimizer != OptimizerKind::Plain {
            let g = self.momentum.data_mut();
            for (gm, gr) in g.chunks_mut(per).zip(grad.data().chunks(per)) {
                let norm = l1(gr);
                for (m, &v) in gm.iter_mut().zip(gr) {
                    *m = if norm > 0.0 { spec.momentum * *m + v / norm } else { spec.momentum * *m };
                }
            }
            dir = self.momentum.clone();
            if spec.optimizer == OptimizerKind::Pi {
                self.previous = dir.clone();
            }
        }
        let a = spec.step_size;
        for row in dir.data_mut().chunks_mut(per) {
            match spec.norm {
                Norm::Inf => row.iter_mut().for_each(|v| *v = a * sign(*v)),
                Norm::Two => {
                    let s = a / l2(row).max(1e-12);
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        dir
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index of the ensemble member used at `iteration` (one draw per iteration).
pub fn ensemble_member(seed: u64, iteration: usize, n_models: usize) -> usize {
    if n_models <= 1 {
        return 0;
    }
    rng::stream(&[seed, domain::ENSEMBLE, iteration as u64]).gen_range(0..n_models)
}

/// Applies the substitute-side resize when the image and model sizes differ.
pub fn to_model_input(tape: &mut Tape, model: &Model, v: Var) -> Result<Var, EngineError> {
    let s = model.spec().input_size;
    let shape = tape.shape(v);
    if shape[2] == s.height && shape[3] == s.width {
        Ok(v)
    } else {
        tape.resize_bilinear(v, s.height, s.width)
    }
}

/// Shared, read-only state of one attack.
pub(crate) struct Env<'a> {
    pub subs: &'a [Model],
    pub spec: &'a AttackSpec,
    pub hooks: Vec<HookRegistry>,
    pub pool: &'a Tensor,
    pub labels: &'a [usize],
    pub counter: Option<Arc<AtomicUsize>>,
    pub channel_means: Option<Vec<f64>>,
}

/// One chunk of the batch.
pub(crate) struct Chunk {
    pub rows: Vec<usize>,
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Which gradient a single backward pass returns.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Probe<'s> {
    pub iteration: usize,
    pub copy: u64,
    pub model: usize,
    pub stack: &'s AugmentStack,
    /// Input scale applied after augmentation (integrated-gradient path points).
    pub input_scale: f64,
    pub noise_scale: f64,
}

impl Env<'_> {
    fn tape(&self, model: usize) -> Tape {
        let t = Tape::with_hooks(self.hooks[model].clone());
        match &self.counter {
            Some(c) => t.counting(c.clone()),
            None => t,
        }
    }

    /// Per-example objective at `delta` and its gradient with respect to `delta`.
    pub fn objective_grad(
        &self,
        chunk: &Chunk,
        agg: Option<&Aggregates>,
        delta: &Tensor,
        probe: Probe,
    ) -> Result<(Tensor, Vec<f64>), AttackError> {
        let model = &self.subs[probe.model];
        let mut tape = self.tape(probe.model);
        let d = tape.input(delta.clone())?;
        let (h, w) = (chunk.x.shape()[2], chunk.x.shape()[3]);
        let ctx = AugmentContext {
            seed: self.spec.seed,
            iteration: probe.iteration as u64,
            copy: probe.copy,
            noise_amplitude: self.spec.noise_amplitude(h, w) * probe.noise_scale,
            pool: self.pool,
            rows: &chunk.rows,
        };
        let mut v = apply_stack(&mut tape, probe.stack, &chunk.x, d, &ctx)?;
        if probe.input_scale != 1.0 {
            v = tape.scale(v, probe.input_scale)?;
        }
        let v = to_model_input(&mut tape, model, v)?;
        let method = self.spec.method.as_ref();
        let wants_blocks = method.is_some_and(|m| m.kind == MethodKind::Se);
        let fwd = model.forward(&mut tape, v, ForwardOptions { trainable: false, block_logits: wants_blocks })?;
        let loss = match method {
            Some(m) => methods::attack_loss(m, model.spec(), &mut tape, &fwd, d, &chunk.y, agg, self.channel_means.as_deref())?,
            None => cross_entropy_per_example(&mut tape, fwd.logits, &chunk.y)?,
        };
        let losses = tape.value(loss).data().to_vec();
        let total = tape.sum(loss)?;
        let mut grads = tape.backward_scalar(total)?;
        let mut g = grads.take(d).unwrap_or_else(|| Tensor::zeros(delta.shape()));
        if probe.input_scale != 1.0 {
            let s = 1.0 / probe.input_scale;
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        Ok((g, losses))
    }

    /// Mean gradient over `copies` independent augmentation draws.
    pub fn averaged(
        &self,
        chunk: &Chunk,
        agg: Option<&Aggregates>,
        delta: &Tensor,
        probe: Probe,
        copies: usize,
    ) -> Result<(Tensor, Vec<f64>), AttackError> {
        if copies <= 1 || probe.stack.is_deterministic() {
            return self.objective_grad(chunk, agg, delta, probe);
        }
        let mut sum_g = Tensor::zeros(delta.shape());
        let mut sum_l = vec![0.0; chunk.rows.len()];
        for k in 0..copies {
            let (g, l) = self.objective_grad(chunk, agg, delta, Probe { copy: k as u64, ..probe })?;
            sum_g.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            sum_l.iter_mut().zip(&l).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / copies as f64;
        sum_g.data_mut().iter_mut().for_each(|v| *v *= inv);
        sum_l.iter_mut().for_each(|v| *v *= inv);
        Ok((sum_g, sum_l))
    }
}

/// Cross-iteration state of output-space estimators (VT).
pub(crate) struct MethodState {
    pub variance: Tensor,
}

/// Gradient that drives the update at `iteration`, including every method-specific estimator.
fn direction(
    env: &Env,
    chunk: &Chunk,
    agg: Option<&Aggregates>,
    state: &mut MethodState,
    point: &Tensor,
    iteration: usize,
) -> Result<(Tensor, Vec<f64>), AttackError> {
    let spec = env.spec;
    let model = ensemble_member(spec.seed, iteration, env.subs.len());
    let probe = Probe { iteration, copy: 0, model, stack: &spec.augment, input_scale: 1.0, noise_scale: 1.0 };
    let Some(m) = &spec.method else {
        return env.averaged(chunk, agg, point, probe, spec.n_backprops_per_iter);
    };
    match m.kind {
        MethodKind::Vt => {
            let (g_hat, loss) = env.objective_grad(chunk, agg, point, probe)?;
            let n = m.n_agg();
            let mut dir = g_hat.zip_map(&state.variance, |a, b| a + b)?;
            if n > 0 {
                let (h, w) = (chunk.x.shape()[2], chunk.x.shape()[3]);
                let radius = m.vt_beta * spec.noise_amplitude(h, w);
                let per = point.numel() / chunk.rows.len();
                let mut sum = Tensor::zeros(point.shape());
                for k in 0..n {
                    let mut p = point.clone();
                    for (row, d) in chunk.rows.iter().zip(p.data_mut().chunks_mut(per)) {
                        let mut r = rng::stream(&[spec.seed, domain::METHOD, *row as u64, iteration as u64, k as u64]);
                        d.iter_mut().for_each(|v| *v += r.gen_range(-radius..=radius));
                    }
                    let (g, _) = env.objective_grad(chunk, agg, &p, Probe { copy: k as u64 + 1, ..probe })?;
                    sum.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                let inv = 1.0 / n as f64;
                state.variance = sum.zip_map(&g_hat, |s, g| s * inv - g)?;
            } else {
                dir = g_hat;
            }
            Ok((dir, loss))
        }
        MethodKind::Taig => {
            let n = m.n_agg().max(1);
            let mut sum = Tensor::zeros(point.shape());
            let mut loss = Vec::new();
            for k in 1..=n {
                let s = k as f64 / n as f64;
                let (g, l) = env.objective_grad(chunk, agg, point, Probe { copy: k as u64, input_scale: s, ..probe })?;
                sum.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                if k == n {
                    loss = l;
                }
            }
            let inv = 1.0 / n as f64;
            sum.data_mut().iter_mut().for_each(|v| *v *= inv);
            Ok((sum, loss))
        }
        MethodKind::VtBaseline | MethodKind::TaigBaseline | MethodKind::IrBaseline => {
            let (extra, copies, noise) = match m.kind {
                MethodKind::VtBaseline => (vec![AugmentKind::Un], m.n_agg() + 1, m.vt_beta),
                MethodKind::TaigBaseline => (vec![AugmentKind::Si, AugmentKind::Un], m.n_agg().max(1), 1.0),
                _ => (vec![AugmentKind::Dp], m.n_agg().max(1), 1.0),
            };
            let stack = spec.augment.with_kinds(&extra)?;
            let un_extra = !spec.augment.contains(AugmentKind::Un);
            let probe = Probe { stack: &stack, noise_scale: if un_extra { noise } else { 1.0 }, ..probe };
            env.averaged(chunk, agg, point, probe, copies)
        }
        _ => env.averaged(chunk, agg, point, probe, spec.n_backprops_per_iter),
    }
}

/// Outcome of one chunk.
pub(crate) struct ChunkRun {
    pub delta: Tensor,
    pub losses: Vec<Vec<f64>>,
    pub grad_norms: Vec<Vec<f64>>,
    pub failures: Vec<ExampleFailure>,
    /// δ after every iteration, when requested.
    pub snapshots: Vec<Tensor>,
}

pub(crate) fn attack_chunk(env: &Env, chunk: &Chunk, keep_snapshots: bool) -> Result<ChunkRun, AttackError> {
    let spec = env.spec;
    let n = chunk.rows.len();
    let per = chunk.x.numel() / n;
    let agg = match &spec.method {
        Some(m) if m.kind.needs_aggregates() => {
            Some(methods::precompute_for_chunk(m, env, chunk)?)
        }
        _ => None,
    };
    let mut delta = init_perturbation(spec, &chunk.x, &chunk.rows);
    let mut state = OptimizerState::new(chunk.x.shape());
    let mut mstate = MethodState { variance: Tensor::zeros(chunk.x.shape()) };
    let mut alive = vec![true; n];
    let mut out = ChunkRun {
        delta: Tensor::zeros(chunk.x.shape()),
        losses: Vec::with_capacity(spec.iterations),
        grad_norms: Vec::with_capacity(spec.iterations),
        failures: Vec::new(),
        snapshots: Vec::new(),
    };
    for t in 0..spec.iterations {
        let point = state.lookahead(&delta, spec);
        let (mut grad, loss) = direction(env, chunk, agg.as_ref(), &mut mstate, &point, t)?;
        let mut norms = vec![f64::NAN; n];
        for (i, g) in grad.data_mut().chunks_mut(per).enumerate() {
            if !alive[i] {
                g.fill(0.0);
                continue;
            }
            if !loss[i].is_finite() || g.iter().any(|v| !v.is_finite()) {
                alive[i] = false;
                g.fill(0.0);
                out.failures.push(ExampleFailure {
                    example: chunk.rows[i],
                    iteration: t,
                    message: format!("non-finite loss {} or gradient; perturbation frozen", loss[i]),
                });
                continue;
            }
            norms[i] = l2(g);
        }
        let inc = state.step(&grad, spec);
        for (i, (d, s)) in delta.data_mut().chunks_mut(per).zip(inc.data().chunks(per)).enumerate() {
            if alive[i] {
                d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
        }
        project(&mut delta, &chunk.x, spec.norm, spec.epsilon);
        out.losses.push(loss.iter().zip(&alive).map(|(&l, &a)| if a { l } else { f64::NAN }).collect());
        out.grad_norms.push(norms);
        if keep_snapshots {
            out.snapshots.push(delta.clone());
        }
    }
    out.delta = delta;
    Ok(out)
}

pub(crate) fn split_chunks(x: &Tensor, y: &[usize]) -> Result<Vec<Chunk>, AttackError> {
    let n = x.shape()[0];
    let per = x.numel() / n;
    (0..n)
        .step_by(ATTACK_CHUNK)
        .map(|s| {
            let e = (s + ATTACK_CHUNK).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = e - s;
            Ok(Chunk {
                rows: (s..e).collect(),
                x: Tensor::new(shape, x.data()[s * per..e * per].to_vec())?,
                y: y[s..e].to_vec(),
            })
        })
        .collect()
}

fn check_batch(subs: &[Model], x: &Tensor, y: &[usize]) -> Result<(), AttackError> {
    if subs.is_empty() {
        return Err(AttackError::NoSubstitute);
    }
    if x.ndim() != 4 || x.shape()[0] != y.len() {
        return Err(AttackError::Labels { images: x.shape()[0], labels: y.len() });
    }
    Ok(())
}

pub(crate) fn build_env<'a>(
    subs: &'a [Model],
    x: &'a Tensor,
    y: &'a [usize],
    spec: &'a AttackSpec,
    opts: &AttackOptions<'a>,
) -> Result<Env<'a>, AttackError> {
    spec.validate()?;
    check_batch(subs, x, y)?;
    let hooks = subs
        .iter()
        .map(|m| match &spec.method {
            Some(p) => methods::install_backward_method(m, p).map(|h| h.into_hooks()),
            None => Ok(HookRegistry::new()),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut env = Env {
        subs,
        spec,
        hooks,
        pool: x,
        labels: y,
        counter: opts.backprop_counter.clone(),
        channel_means: None,
    };
    if let Some(m) = &spec.method {
        if m.kind.uses_features() && subs.len() != 1 {
            return Err(MethodError::Ensemble(m.kind).into());
        }
        if m.kind == MethodKind::Fda {
            let stats = opts.stats.ok_or(MethodError::MissingAggregate("FDA channel statistics"))?;
            env.channel_means = Some(methods::channel_means(m, &subs[0], stats)?);
        }
    }
    Ok(env)
}

/// Untargeted attack on `x` (`[N, 3, H, W]`, values in [0, 1]) with labels `y`.
///
/// With several substitutes one of them is sampled per iteration.
pub fn run_attack(subs: &[Model], x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AttackOutput, AttackError> {
    run_attack_with(subs, x, y, spec, &AttackOptions::default())
}

pub fn run_attack_with(
    subs: &[Model],
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    opts: &AttackOptions,
) -> Result<AttackOutput, AttackError> {
    let env = build_env(subs, x, y, spec, opts)?;
    let chunks = split_chunks(x, y)?;
    let runs = chunks
        .par_iter()
        .map(|c| attack_chunk(&env, c, false))
        .collect::<Result<Vec<_>, _>>()?;
    let mut delta = Vec::with_capacity(x.numel());
    let mut failures = Vec::new();
    for r in &runs {
        delta.extend_from_slice(r.delta.data());
        failures.extend(r.failures.iter().cloned());
    }
    let x_adv = x.zip_map(&Tensor::new(x.shape().to_vec(), delta)?, |a, d| (a + d).clamp(0.0, 1.0))?;
    let mean_of = |pick: &dyn Fn(&ChunkRun) -> &Vec<Vec<f64>>, t: usize| {
        let vals: Vec<f64> = runs.iter().flat_map(|r| pick(r)[t].iter().copied()).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let trace = Trace {
        rows: (0..spec.iterations)
            .map(|t| TraceRow {
                iteration: t + 1,
                loss: mean_of(&|r| &r.losses, t),
                grad_norm: mean_of(&|r| &r.grad_norms, t),
            })
            .collect(),
    };
    Ok(AttackOutput { x_adv, trace, failures })
}

/// Mean over `n_copies` of the gradient of the per-example CE (summed over the
/// batch) at `x + δ`, each copy with its own augmentation draw.
#[allow(clippy::too_many_arguments)]
pub fn averaged_gradient(
    model: &Model,
    x: &Tensor,
    delta: &Tensor,
    y: &[usize],
    n_copies: usize,
    stack: &AugmentStack,
    spec: &AttackSpec,
    iteration: usize,
    counter: Option<Arc<AtomicUsize>>,
) -> Result<Tensor, AttackError> {
    if n_copies == 0 {
        return Err(AttackError::InvalidSpec("n_copies must be at least 1".into()));
    }
    let subs = std::slice::from_ref(model);
    let plain = AttackSpec { method: None, ..spec.clone() };
    let env = build_env(subs, x, y, &plain, &AttackOptions { stats: None, backprop_counter: counter })?;
    let chunk = Chunk { rows: (0..y.len()).collect(), x: x.clone(), y: y.to_vec() };
    let probe = Probe { iteration, copy: 0, model: 0, stack, input_scale: 1.0, noise_scale: 1.0 };
    Ok(env.averaged(&chunk, None, delta, probe, n_copies)?.0)
}

/// Gradient of the summed per-example CE at `x + δ` on the substitute sampled for `iteration`.
pub fn ensemble_gradient(
    models: &[Model],
    x: &Tensor,
    delta: &Tensor,
    y: &[usize],
    seed: u64,
    iteration: usize,
) -> Result<Tensor, AttackError> {
    let spec = AttackSpec { seed, ..AttackSpec::linf() };
    let env = build_env(models, x, y, &spec, &AttackOptions::default())?;
    let chunk = Chunk { rows: (0..y.len()).collect(), x: x.clone(), y: y.to_vec() };
    let model = ensemble_member(seed, iteration, models.len());
    let probe = Probe { iteration, copy: 0, model, stack: &spec.augment, input_scale: 1.0, noise_scale: 1.0 };
    Ok(env.objective_grad(&chunk, None, delta, probe)?.0)
}
