//! Gradient-computation methods: backward hooks, intermediate-feature losses
//! with their precomputed aggregates, and output-space estimators.
//!
//! Feature aggregates that involve class evidence (FIA, NAA) are built from
//! the gradient of the true-class log-probability, so maximizing
//! `−⟨ḡ, f(x′)⟩` suppresses the features that support the true class.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{self, AttackError, AttackOptions, AttackSpec, Chunk, Env, InitKind, OptimizerKind};
use crate::augment::AugmentStack;
use crate::engine::{EngineError, HookDescriptor, HookKind, HookRegistry, Tape, Tensor, Var};
use crate::models::{cross_entropy_per_example, ArchKind, Forward, ForwardOptions, Model, ModelError, ModelSpec, PREDICT_CHUNK};
use crate::rng::{self, domain};

#[derive(Debug, Error)]
pub enum MethodError {
    #[error("method {method} is not applicable to {arch}: {reason}")]
    Incompatible { method: MethodKind, arch: &'static str, reason: &'static str },
    #[error("missing aggregate: {0}")]
    MissingAggregate(&'static str),
    #[error("method {0} needs a single substitute model")]
    Ensemble(MethodKind),
    #[error("invalid method parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "SGM")]
    Sgm,
    #[serde(rename = "LinBP")]
    LinBp,
    #[serde(rename = "ConBP")]
    ConBp,
    #[serde(rename = "PNA")]
    Pna,
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "NRDM")]
    Nrdm,
    #[serde(rename = "TAP")]
    Tap,
    #[serde(rename = "FDA")]
    Fda,
    #[serde(rename = "ILA")]
    Ila,
    #[serde(rename = "ILA++")]
    IlaPlusPlus,
    #[serde(rename = "FIA")]
    Fia,
    #[serde(rename = "NAA")]
    Naa,
    #[serde(rename = "VT")]
    Vt,
    #[serde(rename = "TAIG")]
    Taig,
    #[serde(rename = "VT_baseline")]
    VtBaseline,
    #[serde(rename = "IR_baseline")]
    IrBaseline,
    #[serde(rename = "TAIG_baseline")]
    TaigBaseline,
}

impl MethodKind {
    pub const ALL: [MethodKind; 17] = [
        MethodKind::Sgm,
        MethodKind::LinBp,
        MethodKind::ConBp,
        MethodKind::Pna,
        MethodKind::Se,
        MethodKind::Nrdm,
        MethodKind::Tap,
        MethodKind::Fda,
        MethodKind::Ila,
        MethodKind::IlaPlusPlus,
        MethodKind::Fia,
        MethodKind::Naa,
        MethodKind::Vt,
        MethodKind::Taig,
        MethodKind::VtBaseline,
        MethodKind::IrBaseline,
        MethodKind::TaigBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Sgm => "SGM",
            MethodKind::LinBp => "LinBP",
            MethodKind::ConBp => "ConBP",
            MethodKind::Pna => "PNA",
            MethodKind::Se => "SE",
            MethodKind::Nrdm => "NRDM",
            MethodKind::Tap => "TAP",
            MethodKind::Fda => "FDA",
            MethodKind::Ila => "ILA",
            MethodKind::IlaPlusPlus => "ILA++",
            MethodKind::Fia => "FIA",
            MethodKind::Naa => "NAA",
            MethodKind::Vt => "VT",
            MethodKind::Taig => "TAIG",
            MethodKind::VtBaseline => "VT_baseline",
            MethodKind::IrBaseline => "IR_baseline",
            MethodKind::TaigBaseline => "TAIG_baseline",
        }
    }

    /// Loss defined on a captured intermediate feature.
    pub fn uses_features(self) -> bool {
        matches!(
            self,
            MethodKind::Nrdm
                | MethodKind::Tap
                | MethodKind::Fda
                | MethodKind::Ila
                | MethodKind::IlaPlusPlus
                | MethodKind::Fia
                | MethodKind::Naa
        )
    }

    /// Needs per-example aggregates computed before the attack loop.
    pub fn needs_aggregates(self) -> bool {
        self.uses_features() && self != MethodKind::Fda
    }

    fn default_n_agg(self) -> usize {
        match self {
            MethodKind::Fia | MethodKind::Naa => 30,
            MethodKind::Vt | MethodKind::Taig | MethodKind::VtBaseline | MethodKind::IrBaseline | MethodKind::TaigBaseline => 20,
            _ => 1,
        }
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn d_ridge() -> f64 {
    0.1
}
fn d_drop_fia() -> f64 {
    0.3
}
fn d_tap_lambda() -> f64 {
    0.005
}
fn d_tap_alpha() -> f64 {
    0.5
}
fn d_tap_eta() -> f64 {
    0.01
}
fn d_vt_beta() -> f64 {
    1.5
}
fn d_reference() -> usize {
    10
}

/// Method choice and its hyper-parameters; unset options take per-architecture defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub kind: MethodKind,
    /// Index into the substitute's feature layers.
    #[serde(default)]
    pub layer_index: Option<usize>,
    /// SGM residual-branch gradient scale.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "d_ridge")]
    pub ridge_lambda: f64,
    /// FIA mask count, NAA path steps, VT/TAIG sample count.
    #[serde(default)]
    pub n_agg: Option<usize>,
    #[serde(default = "d_drop_fia")]
    pub drop_prob_fia: f64,
    #[serde(default = "d_tap_lambda")]
    pub tap_lambda: f64,
    #[serde(default = "d_tap_alpha")]
    pub tap_alpha: f64,
    #[serde(default = "d_tap_eta")]
    pub tap_eta: f64,
    #[serde(default = "d_vt_beta")]
    pub vt_beta: f64,
    /// Length of the I-FGSM reference run for ILA / ILA++.
    #[serde(default = "d_reference")]
    pub reference_iterations: usize,
}

impl MethodParams {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            layer_index: None,
            gamma: None,
            ridge_lambda: d_ridge(),
            n_agg: None,
            drop_prob_fia: d_drop_fia(),
            tap_lambda: d_tap_lambda(),
            tap_alpha: d_tap_alpha(),
            tap_eta: d_tap_eta(),
            vt_beta: d_vt_beta(),
            reference_iterations: d_reference(),
        }
    }

    pub fn with_layer(mut self, layer_index: usize) -> Self {
        self.layer_index = Some(layer_index);
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn with_n_agg(mut self, n: usize) -> Self {
        self.n_agg = Some(n);
        self
    }

    pub fn n_agg(&self) -> usize {
        self.n_agg.unwrap_or_else(|| self.kind.default_n_agg())
    }

    pub fn layer_index_for(&self, spec: &ModelSpec) -> usize {
        self.layer_index.unwrap_or_else(|| default_layer_index(spec))
    }

    pub fn gamma_for(&self, spec: &ModelSpec) -> f64 {
        self.gamma.unwrap_or(match spec.arch {
            ArchKind::ToyVit => 0.6,
            _ => 0.5,
        })
    }

    /// Enforces the method/architecture compatibility matrix and parameter ranges.
    pub fn validate_for(&self, spec: &ModelSpec) -> Result<(), MethodError> {
        let incompatible = |reason| MethodError::Incompatible { method: self.kind, arch: spec.arch.name(), reason };
        match self.kind {
            MethodKind::Sgm if spec.skip_labels().is_empty() => return Err(incompatible("needs residual branches")),
            MethodKind::LinBp | MethodKind::ConBp if spec.relu_labels().is_empty() => {
                return Err(incompatible("needs ReLU layers"))
            }
            MethodKind::Pna | MethodKind::Se if spec.attention_labels().is_empty() => {
                return Err(incompatible("needs attention blocks"))
            }
            _ => {}
        }
        if self.kind.uses_features() || matches!(self.kind, MethodKind::LinBp | MethodKind::ConBp) {
            spec.feature_label(self.layer_index_for(spec))?;
        }
        let bad = |m: String| Err(MethodError::InvalidParam(m));
        if self.kind == MethodKind::Sgm {
            let g = self.gamma_for(spec);
            if !(g > 0.0 && g <= 1.0) {
                return bad(format!("SGM gamma must lie in (0, 1], got {g}"));
            }
        }
        if self.kind == MethodKind::IlaPlusPlus && self.ridge_lambda.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad(format!("ridge_lambda must be positive, got {}", self.ridge_lambda));
        }
        if !(0.0..1.0).contains(&self.drop_prob_fia) {
            return bad(format!("drop_prob_fia must lie in [0, 1), got {}", self.drop_prob_fia));
        }
        if matches!(self.kind, MethodKind::Fia | MethodKind::Naa) && self.n_agg() == 0 {
            return bad(format!("{} needs n_agg >= 1", self.kind));
        }
        if matches!(self.kind, MethodKind::Ila | MethodKind::IlaPlusPlus) && self.reference_iterations == 0 {
            return bad("reference_iterations must be at least 1".into());
        }
        Ok(())
    }
}

/// Middle feature layer of the architecture.
pub fn default_layer_index(spec: &ModelSpec) -> usize {
    spec.feature_labels().len() / 2
}

/// A model paired with an attack-local hook registry.
#[derive(Clone, Debug)]
pub struct HookedModel<'a> {
    model: &'a Model,
    hooks: HookRegistry,
}

impl<'a> HookedModel<'a> {
    pub fn model(&self) -> &'a Model {
        self.model
    }

    pub fn hooks(&self) -> &HookRegistry {
        &self.hooks
    }

    pub fn into_hooks(self) -> HookRegistry {
        self.hooks
    }

    /// Fresh tape carrying this handle's hooks.
    pub fn tape(&self) -> Tape {
        Tape::with_hooks(self.hooks.clone())
    }
}

/// Hook registry realizing `params` on `model` (plus a capture of the feature layer when the loss needs it).
pub fn install_backward_method<'a>(model: &'a Model, params: &MethodParams) -> Result<HookedModel<'a>, MethodError> {
    let spec = model.spec();
    params.validate_for(spec)?;
    let labels = spec.label_set();
    let mut hooks = HookRegistry::new();
    let desc = match params.kind {
        MethodKind::Sgm => Some(HookDescriptor::scale_branch(params.gamma_for(spec), spec.skip_labels())),
        MethodKind::LinBp => {
            Some(HookDescriptor::new(HookKind::IdentityReluGrad, spec.relu_labels_from(params.layer_index_for(spec))?))
        }
        MethodKind::ConBp => {
            Some(HookDescriptor::new(HookKind::SoftplusReluGrad, spec.relu_labels_from(params.layer_index_for(spec))?))
        }
        MethodKind::Pna => Some(HookDescriptor::new(HookKind::SkipAttentionGrad, spec.attention_labels())),
        _ => None,
    };
    if let Some(d) = desc {
        hooks.install(&d, &labels)?;
    }
    if params.kind.uses_features() {
        let label = spec.feature_label(params.layer_index_for(spec))?;
        hooks.install(&HookDescriptor::new(HookKind::CaptureForward, [label]), &labels)?;
    }
    Ok(HookedModel { model, hooks })
}

/// Precomputed per-example quantities, stacked along the first axis like the feature they refer to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregates {
    /// f_l(x) at the benign point.
    pub clean: Option<Tensor>,
    /// ILA Δy.
    pub ila_direction: Option<Tensor>,
    /// ILA++ w*.
    pub ila_weights: Option<Tensor>,
    /// FIA ḡ (ℓ₂-normalized per example).
    pub fia_gradient: Option<Tensor>,
    /// NAA attribution A.
    pub naa_attribution: Option<Tensor>,
}

fn need<'a>(t: &'a Option<Tensor>, what: &'static str) -> Result<&'a Tensor, MethodError> {
    t.as_ref().ok_or(MethodError::MissingAggregate(what))
}

/// Channel axis of a captured feature: 1 for `[N, C, H, W]`, last for token features.
fn channel_axis(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        1
    } else {
        shape.len() - 1
    }
}

/// Per-example loss on captured feature `f` (to be maximized).
///
/// `ce` (per-example cross-entropy) is required by TAP, `delta` by TAP's
/// smoothness term, `channel_means` by FDA.
#[allow(clippy::too_many_arguments)]
pub fn feature_loss(
    params: &MethodParams,
    tape: &mut Tape,
    f: Var,
    delta: Var,
    ce: Option<Var>,
    agg: &Aggregates,
    channel_means: Option<&[f64]>,
) -> Result<Var, MethodError> {
    let shape = tape.shape(f).to_vec();
    let clean = |tape: &mut Tape, agg: &Aggregates| -> Result<Var, MethodError> {
        Ok(tape.constant(need(&agg.clean, "clean features")?.clone())?)
    };
    let v = match params.kind {
        MethodKind::Nrdm => {
            let c = clean(tape, agg)?;
            let diff = tape.sub(f, c)?;
            tape.norm_rows(diff)?
        }
        MethodKind::Tap => {
            let ce = ce.ok_or(MethodError::MissingAggregate("cross-entropy term"))?;
            let c = clean(tape, agg)?;
            let sc = tape.sign_pow(c, params.tap_alpha)?;
            let sf = tape.sign_pow(f, params.tap_alpha)?;
            let diff = tape.sub(sc, sf)?;
            let sq = tape.mul(diff, diff)?;
            let feat = tape.sum_rows(sq)?;
            let feat = tape.scale(feat, params.tap_lambda)?;
            let pooled = tape.avg_pool_same(delta, 3)?;
            let pooled = tape.abs(pooled)?;
            let smooth = tape.sum_rows(pooled)?;
            let smooth = tape.scale(smooth, -params.tap_eta)?;
            let a = tape.add(ce, feat)?;
            tape.add(a, smooth)?
        }
        MethodKind::Fda => {
            let mu = channel_means.ok_or(MethodError::MissingAggregate("FDA channel statistics"))?;
            let axis = channel_axis(&shape);
            if mu.len() != shape[axis] {
                return Err(MethodError::InvalidParam(format!(
                    "{} channel means for feature shape {shape:?}",
                    mu.len()
                )));
            }
            let inner: usize = shape[axis + 1..].iter().product();
            let fv = tape.value(f).data();
            let below: Vec<bool> = fv.iter().enumerate().map(|(i, &v)| v < mu[(i / inner) % mu.len()]).collect();
            let above: Vec<bool> = below.iter().map(|b| !b).collect();
            let zeros = tape.constant(Tensor::zeros(&shape))?;
            let lo = tape.select(below, f, zeros)?;
            let hi = tape.select(above, f, zeros)?;
            let mut logs = Vec::new();
            for part in [lo, hi] {
                let n = tape.norm_rows(part)?;
                let n = tape.clamp(n, 1e-12, f64::INFINITY)?;
                logs.push(tape.log(n)?);
            }
            tape.sub(logs[0], logs[1])?
        }
        MethodKind::Ila | MethodKind::IlaPlusPlus => {
            let dir = if params.kind == MethodKind::Ila {
                need(&agg.ila_direction, "ILA direction")?
            } else {
                need(&agg.ila_weights, "ILA++ weights")?
            };
            let dir = tape.constant(dir.clone())?;
            let c = clean(tape, agg)?;
            let diff = tape.sub(f, c)?;
            let prod = tape.mul(diff, dir)?;
            tape.sum_rows(prod)?
        }
        MethodKind::Fia => {
            let g = tape.constant(need(&agg.fia_gradient, "FIA aggregate gradient")?.clone())?;
            let prod = tape.mul(g, f)?;
            let s = tape.sum_rows(prod)?;
            tape.scale(s, -1.0)?
        }
        MethodKind::Naa => {
            let a = need(&agg.naa_attribution, "NAA attribution")?;
            let pos = tape.constant(a.map(|v| v.max(0.0)))?;
            let neg = tape.constant(a.map(|v| (-v).max(0.0)))?;
            let p = tape.mul(pos, f)?;
            let p = tape.sum_rows(p)?;
            let q = tape.mul(neg, f)?;
            let q = tape.sum_rows(q)?;
            tape.sub(q, p)?
        }
        k => return Err(MethodError::InvalidParam(format!("{k} has no feature loss"))),
    };
    Ok(v)
}

/// Per-example attack objective for `params` after a forward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attack_loss(
    params: &MethodParams,
    spec: &ModelSpec,
    tape: &mut Tape,
    fwd: &Forward,
    delta: Var,
    labels: &[usize],
    agg: Option<&Aggregates>,
    channel_means: Option<&[f64]>,
) -> Result<Var, MethodError> {
    if params.kind == MethodKind::Se {
        let mut acc: Option<Var> = None;
        for &b in &fwd.block_logits {
            let ce = cross_entropy_per_example(tape, b, labels)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, ce)?,
                None => ce,
            });
        }
        let acc = acc.ok_or(MethodError::MissingAggregate("intermediate class tokens"))?;
        return Ok(tape.scale(acc, 1.0 / fwd.block_logits.len() as f64)?);
    }
    if !params.kind.uses_features() {
        return Ok(cross_entropy_per_example(tape, fwd.logits, labels)?);
    }
    let label = spec.feature_label(params.layer_index_for(spec))?;
    let f = tape.captured(&label).ok_or(MethodError::MissingAggregate("captured feature"))?;
    let ce = if params.kind == MethodKind::Tap { Some(cross_entropy_per_example(tape, fwd.logits, labels)?) } else { None };
    let empty = Aggregates::default();
    feature_loss(params, tape, f, delta, ce, agg.unwrap_or(&empty), channel_means)
}

fn capture_tape(model: &Model, label: &str) -> Result<Tape, MethodError> {
    let mut hooks = HookRegistry::new();
    hooks.install(&HookDescriptor::new(HookKind::CaptureForward, [label]), &model.spec().label_set())?;
    Ok(Tape::with_hooks(hooks))
}

/// Feature at `label` and per-example CE for a canvas-size batch.
pub fn features_and_loss(model: &Model, label: &str, x: &Tensor, y: &[usize]) -> Result<(Tensor, Vec<f64>), MethodError> {
    let mut tape = capture_tape(model, label)?;
    let xv = tape.constant(x.clone())?;
    let v = attack::to_model_input(&mut tape, model, xv)?;
    let fwd = model.forward(&mut tape, v, ForwardOptions::default())?;
    let ce = cross_entropy_per_example(&mut tape, fwd.logits, y)?;
    let f = tape.captured_value(label).ok_or(MethodError::MissingAggregate("captured feature"))?;
    Ok((f, tape.value(ce).data().to_vec()))
}

pub fn features_at(model: &Model, label: &str, x: &Tensor) -> Result<Tensor, MethodError> {
    let y = vec![0; x.shape()[0]];
    Ok(features_and_loss(model, label, x, &y)?.0)
}

/// Gradient of Σ log p_y with respect to the feature at `label`.
fn feature_evidence_grad(model: &Model, label: &str, x: &Tensor, y: &[usize]) -> Result<Tensor, MethodError> {
    let mut tape = capture_tape(model, label)?;
    let xv = tape.input(x.clone())?;
    let v = attack::to_model_input(&mut tape, model, xv)?;
    let fwd = model.forward(&mut tape, v, ForwardOptions::default())?;
    let ce = cross_entropy_per_example(&mut tape, fwd.logits, y)?;
    let total = tape.sum(ce)?;
    let total = tape.scale(total, -1.0)?;
    let f = tape.captured(label).ok_or(MethodError::MissingAggregate("captured feature"))?;
    let shape = tape.shape(f).to_vec();
    let grads = tape.backward_scalar(total)?;
    Ok(grads.get_or_zeros(f, &shape))
}

/// δ after every iteration of the ILA reference attack.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrace {
    pub deltas: Vec<Tensor>,
}

/// Plain I-FGSM with the attack's norm and budget, used as the ILA reference.
pub fn reference_spec(params: &MethodParams, spec: &AttackSpec) -> AttackSpec {
    AttackSpec {
        iterations: params.reference_iterations,
        init: InitKind::Zeros,
        optimizer: OptimizerKind::Plain,
        augment: AugmentStack::empty(),
        method: None,
        n_backprops_per_iter: 1,
        ..spec.clone()
    }
}

fn reference_for_chunk(env: &Env, chunk: &Chunk, params: &MethodParams) -> Result<ReferenceTrace, AttackError> {
    let spec = reference_spec(params, env.spec);
    let ref_env = attack::build_env(env.subs, env.pool, env.labels, &spec, &AttackOptions::default())?;
    let run = attack::attack_chunk(&ref_env, chunk, true)?;
    Ok(ReferenceTrace { deltas: run.snapshots })
}

/// Runs the reference attack on a whole batch.
pub fn reference_trace(model: &Model, x: &Tensor, y: &[usize], params: &MethodParams, spec: &AttackSpec) -> Result<ReferenceTrace, AttackError> {
    let subs = std::slice::from_ref(model);
    let rspec = reference_spec(params, spec);
    let env = attack::build_env(subs, x, y, &rspec, &AttackOptions::default())?;
    let chunk = Chunk { rows: (0..y.len()).collect(), x: x.clone(), y: y.to_vec() };
    Ok(ReferenceTrace { deltas: attack::attack_chunk(&env, &chunk, true)?.snapshots })
}

fn add_delta(x: &Tensor, d: &Tensor) -> Result<Tensor, EngineError> {
    x.zip_map(d, |a, b| (a + b).clamp(0.0, 1.0))
}

fn per_row(t: &Tensor) -> usize {
    t.numel() / t.shape()[0]
}

/// Ridge map `w = Hᵀ(HHᵀ + λI)⁻¹ r` for one example; `h` holds T rows of length m.
pub fn ridge_weights(h: &[Vec<f64>], r: &[f64], lambda: f64) -> Result<Vec<f64>, MethodError> {
    if lambda.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(MethodError::InvalidParam(format!("ridge_lambda must be positive, got {lambda}")));
    }
    let t = h.len();
    let gram = DMatrix::from_fn(t, t, |a, b| h[a].iter().zip(&h[b]).map(|(x, y)| x * y).sum::<f64>())
        + DMatrix::identity(t, t) * lambda;
    let chol = gram
        .cholesky()
        .ok_or_else(|| MethodError::InvalidParam("ridge system is not positive definite".into()))?;
    let a = chol.solve(&DVector::from_column_slice(r));
    let m = h.first().map_or(0, Vec::len);
    let mut w = vec![0.0; m];
    for (row, &coef) in h.iter().zip(a.iter()) {
        w.iter_mut().zip(row).for_each(|(o, v)| *o += coef * v);
    }
    Ok(w)
}

/// Computes the aggregates `params` needs for benign images `x` (rows keyed by `rows`).
#[allow(clippy::too_many_arguments)]
pub fn precompute_aggregates(
    params: &MethodParams,
    model: &Model,
    x: &Tensor,
    y: &[usize],
    rows: &[usize],
    seed: u64,
    reference: Option<&ReferenceTrace>,
) -> Result<Aggregates, MethodError> {
    params.validate_for(model.spec())?;
    let label = model.spec().feature_label(params.layer_index_for(model.spec()))?;
    let (clean, clean_ce) = features_and_loss(model, &label, x, y)?;
    let per = per_row(&clean);
    let n = y.len();
    let mut agg = Aggregates { clean: Some(clean.clone()), ..Aggregates::default() };
    match params.kind {
        MethodKind::Ila => {
            let last = reference.and_then(|r| r.deltas.last()).ok_or(MethodError::MissingAggregate("ILA reference trace"))?;
            let adv = features_at(model, &label, &add_delta(x, last)?)?;
            agg.ila_direction = Some(adv.zip_map(&clean, |a, b| a - b)?);
        }
        MethodKind::IlaPlusPlus => {
            let trace = reference.filter(|r| !r.deltas.is_empty()).ok_or(MethodError::MissingAggregate("ILA++ reference trace"))?;
            let mut h: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
            let mut r: Vec<Vec<f64>> = vec![Vec::new(); n];
            for d in &trace.deltas {
                let (f, ce) = features_and_loss(model, &label, &add_delta(x, d)?, y)?;
                for i in 0..n {
                    let row = &f.data()[i * per..(i + 1) * per];
                    let base = &clean.data()[i * per..(i + 1) * per];
                    h[i].push(row.iter().zip(base).map(|(a, b)| a - b).collect());
                    r[i].push(ce[i] - clean_ce[i]);
                }
            }
            let mut w = Vec::with_capacity(n * per);
            for i in 0..n {
                w.extend(ridge_weights(&h[i], &r[i], params.ridge_lambda)?);
            }
            agg.ila_weights = Some(Tensor::new(clean.shape().to_vec(), w)?);
        }
        MethodKind::Fia => {
            let px = per_row(x);
            let mut sum = Tensor::zeros(clean.shape());
            for k in 0..params.n_agg() {
                let mut masked = x.clone();
                for (img, &row) in masked.data_mut().chunks_mut(px).zip(rows) {
                    let mut r = rng::stream(&[seed, domain::AGGREGATE, row as u64, k as u64]);
                    img.iter_mut().for_each(|v| {
                        if r.gen::<f64>() < params.drop_prob_fia {
                            *v = 0.0;
                        }
                    });
                }
                let g = feature_evidence_grad(model, &label, &masked, y)?;
                sum.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            for row in sum.data_mut().chunks_mut(per) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            agg.fia_gradient = Some(sum);
        }
        MethodKind::Naa => {
            let steps = params.n_agg();
            let base = features_at(model, &label, &Tensor::zeros(x.shape()))?;
            let mut sum = Tensor::zeros(clean.shape());
            for k in 1..=steps {
                let s = k as f64 / steps as f64;
                let g = feature_evidence_grad(model, &label, &x.map(|v| v * s), y)?;
                sum.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / steps as f64;
            let diff = clean.zip_map(&base, |a, b| a - b)?;
            agg.naa_attribution = Some(diff.zip_map(&sum, |d, g| d * g * inv)?);
        }
        _ => {}
    }
    Ok(agg)
}

pub(crate) fn precompute_for_chunk(params: &MethodParams, env: &Env, chunk: &Chunk) -> Result<Aggregates, AttackError> {
    let reference = match params.kind {
        MethodKind::Ila | MethodKind::IlaPlusPlus => Some(reference_for_chunk(env, chunk, params)?),
        _ => None,
    };
    Ok(precompute_aggregates(params, &env.subs[0], &chunk.x, &chunk.y, &chunk.rows, env.spec.seed, reference.as_ref())?)
}

/// Per-channel mean of the feature layer over `stats` (canvas-size images).
pub fn channel_means(params: &MethodParams, model: &Model, stats: &Tensor) -> Result<Vec<f64>, MethodError> {
    let label = model.spec().feature_label(params.layer_index_for(model.spec()))?;
    let n = stats.shape()[0];
    let px = per_row(stats);
    let mut sums: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for s in (0..n).step_by(PREDICT_CHUNK) {
        let e = (s + PREDICT_CHUNK).min(n);
        let mut shape = stats.shape().to_vec();
        shape[0] = e - s;
        let batch = Tensor::new(shape, stats.data()[s * px..e * px].to_vec())?;
        let f = features_at(model, &label, &batch)?;
        let fs = f.shape().to_vec();
        let axis = channel_axis(&fs);
        let inner: usize = fs[axis + 1..].iter().product();
        let ch = fs[axis];
        if sums.is_empty() {
            sums = vec![0.0; ch];
        }
        for (i, v) in f.data().iter().enumerate() {
            sums[(i / inner) % ch] += v;
        }
        count += f.numel() / ch;
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}
