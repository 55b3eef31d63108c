//! Input augmentations applied to the perturbed image once per iteration.
//!
//! A stack is applied in the fixed order UN → DP → DI2 → TI → SI/ADMIX:
//!
//! ```text
//! v = clip(x + δ ⊙ M + u)              M: DP keep mask (ones without DP), u: UN noise (zero without UN)
//! v = pad(resize(v, r), offset)        DI2, with probability apply_prob
//! v = translate(v, dy, dx)             TI
//! v = 2^-i · v  [+ η · x″]             SI / ADMIX
//! ```
//!
//! All draws come from streams keyed by (seed, example, iteration, copy, kind).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Tape, Tensor, Var};
use crate::rng::{self, domain};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augmentation {0} appears twice in the stack")]
    Duplicate(AugmentKind),
    #[error("SI and ADMIX are mutually exclusive (ADMIX already scales)")]
    ScaleConflict,
    #[error("DP patch size {patch} does not divide the {height}x{width} image")]
    PatchSize { patch: usize, height: usize, width: usize },
    #[error("ADMIX needs at least two images in the batch")]
    AdmixBatch,
    #[error("invalid augmentation parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AugmentKind {
    #[serde(rename = "UN")]
    Un,
    #[serde(rename = "DP")]
    Dp,
    #[serde(rename = "DI2")]
    Di2,
    #[serde(rename = "TI")]
    Ti,
    #[serde(rename = "SI")]
    Si,
    #[serde(rename = "ADMIX")]
    Admix,
}

impl AugmentKind {
    /// Application order.
    pub const CANONICAL: [AugmentKind; 6] =
        [AugmentKind::Un, AugmentKind::Dp, AugmentKind::Di2, AugmentKind::Ti, AugmentKind::Si, AugmentKind::Admix];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Un => "UN",
            AugmentKind::Dp => "DP",
            AugmentKind::Di2 => "DI2",
            AugmentKind::Ti => "TI",
            AugmentKind::Si => "SI",
            AugmentKind::Admix => "ADMIX",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-kind hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Multiplier on the norm-dependent UN amplitude supplied by the attack.
    pub un_scale: f64,
    pub dp_patch: usize,
    pub dp_drop: f64,
    pub di2_min_resize: usize,
    pub di2_prob: f64,
    pub ti_max_shift: usize,
    /// SI/ADMIX draw i uniformly from 0..=si_max_exponent and scale by 2^-i.
    pub si_max_exponent: u32,
    pub admix_eta: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self::for_size(32)
    }
}

impl AugmentParams {
    /// Defaults for a square image of side `size`; the DI2 lower bound keeps the 26/32 ratio.
    pub fn for_size(size: usize) -> Self {
        Self {
            un_scale: 1.0,
            dp_patch: 4,
            dp_drop: 0.5,
            di2_min_resize: ((size * 26 + 16) / 32).max(1),
            di2_prob: 0.7,
            ti_max_shift: 1,
            si_max_exponent: 4,
            admix_eta: 0.2,
        }
    }

    fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidParam(m.to_string()));
        if !(0.0..=1.0).contains(&self.dp_drop) {
            return bad("dp_drop must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.di2_prob) {
            return bad("di2_prob must lie in [0, 1]");
        }
        if self.dp_patch == 0 || self.di2_min_resize == 0 {
            return bad("dp_patch and di2_min_resize must be positive");
        }
        if !(self.un_scale >= 0.0 && self.un_scale.is_finite()) || !self.admix_eta.is_finite() {
            return bad("un_scale and admix_eta must be finite, un_scale non-negative");
        }
        Ok(())
    }
}

/// Validated, canonically ordered set of augmentations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStack")]
pub struct AugmentStack {
    kinds: Vec<AugmentKind>,
    pub params: AugmentParams,
}

#[derive(Deserialize)]
struct RawStack {
    #[serde(default)]
    kinds: Vec<AugmentKind>,
    #[serde(default)]
    params: AugmentParams,
}

impl TryFrom<RawStack> for AugmentStack {
    type Error = AugmentError;

    fn try_from(raw: RawStack) -> Result<Self, Self::Error> {
        AugmentStack::new(raw.kinds, raw.params)
    }
}

impl AugmentStack {
    pub fn new(kinds: impl IntoIterator<Item = AugmentKind>, params: AugmentParams) -> Result<Self, AugmentError> {
        let mut sorted: Vec<AugmentKind> = Vec::new();
        for k in kinds {
            if sorted.contains(&k) {
                return Err(AugmentError::Duplicate(k));
            }
            sorted.push(k);
        }
        if sorted.contains(&AugmentKind::Si) && sorted.contains(&AugmentKind::Admix) {
            return Err(AugmentError::ScaleConflict);
        }
        params.validate()?;
        sorted.sort();
        Ok(Self { kinds: sorted, params })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn kinds(&self) -> &[AugmentKind] {
        &self.kinds
    }

    pub fn contains(&self, kind: AugmentKind) -> bool {
        self.kinds.contains(&kind)
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// True when applying the stack draws no random numbers.
    pub fn is_deterministic(&self) -> bool {
        self.kinds.iter().all(|k| match k {
            AugmentKind::Un => self.params.un_scale == 0.0,
            AugmentKind::Dp => self.params.dp_drop == 0.0,
            AugmentKind::Di2 => self.params.di2_prob == 0.0,
            AugmentKind::Ti => self.params.ti_max_shift == 0,
            AugmentKind::Si | AugmentKind::Admix => false,
        })
    }

    /// Union with extra kinds; SI is dropped when ADMIX is present.
    pub fn with_kinds(&self, extra: &[AugmentKind]) -> Result<Self, AugmentError> {
        let mut kinds = self.kinds.clone();
        for &k in extra {
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
        if kinds.contains(&AugmentKind::Admix) {
            kinds.retain(|&k| k != AugmentKind::Si);
        }
        Self::new(kinds, self.params.clone())
    }

    /// Canonical name fragment, e.g. `UN-DP-DI2`.
    pub fn label(&self) -> String {
        self.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("-")
    }
}

/// Random choices for one example and one call.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    /// UN noise, one value per pixel.
    pub noise: Option<Vec<f64>>,
    /// DP keep flags per patch, row-major over the patch grid.
    pub keep: Option<Vec<bool>>,
    /// DI2 `(size, top, left)`.
    pub resize: Option<(usize, usize, usize)>,
    /// TI `(dy, dx)`.
    pub shift: Option<(isize, isize)>,
    pub scale: f64,
    /// ADMIX partner: row of the pool.
    pub mix: Option<usize>,
}

impl Draw {
    pub fn identity() -> Self {
        Self { noise: None, keep: None, resize: None, shift: None, scale: 1.0, mix: None }
    }
}

/// Where a call sits in the attack; keys the random streams.
#[derive(Clone, Copy, Debug)]
pub struct AugmentContext<'a> {
    pub seed: u64,
    pub iteration: u64,
    pub copy: u64,
    /// UN noise half-width before `un_scale`.
    pub noise_amplitude: f64,
    /// Benign images the ADMIX partner is drawn from.
    pub pool: &'a Tensor,
    /// Row of `pool` for each example of the batch being augmented.
    pub rows: &'a [usize],
}

fn check_patch(params: &AugmentParams, h: usize, w: usize) -> Result<(), AugmentError> {
    if !h.is_multiple_of(params.dp_patch) || !w.is_multiple_of(params.dp_patch) {
        return Err(AugmentError::PatchSize { patch: params.dp_patch, height: h, width: w });
    }
    Ok(())
}

/// Draws the random choices for example `row` of the pool.
pub fn sample_draw(
    stack: &AugmentStack,
    image: [usize; 3],
    ctx: &AugmentContext,
    row: usize,
) -> Result<Draw, AugmentError> {
    let [c, h, w] = image;
    let p = &stack.params;
    let mut d = Draw::identity();
    for &kind in &stack.kinds {
        let mut r = rng::stream(&[ctx.seed, domain::AUGMENT, row as u64, ctx.iteration, ctx.copy, kind.tag()]);
        match kind {
            AugmentKind::Un => {
                let a = ctx.noise_amplitude * p.un_scale;
                if a > 0.0 {
                    d.noise = Some((0..c * h * w).map(|_| r.gen_range(-a..=a)).collect());
                }
            }
            AugmentKind::Dp => {
                check_patch(p, h, w)?;
                let cells = (h / p.dp_patch) * (w / p.dp_patch);
                d.keep = Some((0..cells).map(|_| r.gen::<f64>() >= p.dp_drop).collect());
            }
            AugmentKind::Di2 => {
                let side = h.min(w);
                let lo = p.di2_min_resize.min(side);
                if r.gen::<f64>() < p.di2_prob {
                    let s = r.gen_range(lo..=side);
                    let top = r.gen_range(0..=h - s);
                    let left = r.gen_range(0..=w - s);
                    d.resize = Some((s, top, left));
                }
            }
            AugmentKind::Ti => {
                let m = p.ti_max_shift as isize;
                d.shift = Some((r.gen_range(-m..=m), r.gen_range(-m..=m)));
            }
            AugmentKind::Si | AugmentKind::Admix => {
                let i = r.gen_range(0..=p.si_max_exponent);
                d.scale = 0.5f64.powi(i as i32);
                if kind == AugmentKind::Admix {
                    let n = ctx.pool.shape()[0];
                    if n < 2 {
                        return Err(AugmentError::AdmixBatch);
                    }
                    let j = r.gen_range(0..n - 1);
                    d.mix = Some(if j >= row { j + 1 } else { j });
                }
            }
        }
    }
    Ok(d)
}

/// Applies fixed draws; gradients reach `delta` through every transform.
pub fn apply_draws(
    tape: &mut Tape,
    stack: &AugmentStack,
    x: &Tensor,
    delta: Var,
    draws: &[Draw],
    pool: &Tensor,
) -> Result<Var, AugmentError> {
    let shape = x.shape().to_vec();
    if tape.shape(delta) != shape.as_slice() {
        return Err(EngineError::shape("augment", &shape, tape.shape(delta)).into());
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = c * h * w;
    let p = &stack.params;

    let mut d = delta;
    if draws.iter().any(|dr| dr.keep.is_some()) {
        check_patch(p, h, w)?;
        let gw = w / p.dp_patch;
        let mut m = vec![1.0; n * plane];
        for (i, dr) in draws.iter().enumerate() {
            let Some(keep) = &dr.keep else { continue };
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        if !keep[(y / p.dp_patch) * gw + xx / p.dp_patch] {
                            m[i * plane + ch * h * w + y * w + xx] = 0.0;
                        }
                    }
                }
            }
        }
        let m = tape.constant(Tensor::new(shape.clone(), m)?)?;
        d = tape.mul(d, m)?;
    }
    let xc = tape.constant(x.clone())?;
    let mut v = tape.add(xc, d)?;
    if draws.iter().any(|dr| dr.noise.is_some()) {
        let mut u = vec![0.0; n * plane];
        for (i, dr) in draws.iter().enumerate() {
            if let Some(noise) = &dr.noise {
                u[i * plane..(i + 1) * plane].copy_from_slice(noise);
            }
        }
        let u = tape.constant(Tensor::new(shape.clone(), u)?)?;
        v = tape.add(v, u)?;
    }
    v = tape.clamp(v, 0.0, 1.0)?;

    let spatial = |dr: &Draw| dr.resize.is_some_and(|(s, _, _)| s != h || s != w) || dr.shift.is_some_and(|s| s != (0, 0));
    if draws.iter().any(spatial) {
        let mut rows = Vec::with_capacity(n);
        for (i, dr) in draws.iter().enumerate() {
            let mut r = tape.slice(v, 0, i, 1)?;
            if let Some((s, top, left)) = dr.resize {
                if s != h || s != w {
                    r = tape.resize_bilinear(r, s, s)?;
                    r = tape.pad2d(r, top, left, h - s - top, w - s - left)?;
                }
            }
            if let Some((dy, dx)) = dr.shift {
                if (dy, dx) != (0, 0) {
                    r = tape.translate(r, dy, dx)?;
                }
            }
            rows.push(r);
        }
        v = if n == 1 { rows[0] } else { tape.concat(&rows, 0)? };
    }

    if draws.iter().any(|dr| dr.scale != 1.0) {
        let mut s = vec![0.0; n * plane];
        for (i, dr) in draws.iter().enumerate() {
            s[i * plane..(i + 1) * plane].fill(dr.scale);
        }
        let s = tape.constant(Tensor::new(shape.clone(), s)?)?;
        v = tape.mul(v, s)?;
    }
    if draws.iter().any(|dr| dr.mix.is_some()) {
        let mut mix = vec![0.0; n * plane];
        for (i, dr) in draws.iter().enumerate() {
            if let Some(j) = dr.mix {
                let src = &pool.data()[j * plane..(j + 1) * plane];
                for (o, s) in mix[i * plane..(i + 1) * plane].iter_mut().zip(src) {
                    *o = p.admix_eta * s;
                }
            }
        }
        let mix = tape.constant(Tensor::new(shape, mix)?)?;
        v = tape.add(v, mix)?;
    }
    Ok(v)
}

/// One augmented copy of `x + δ` for every row of the batch.
pub fn apply_stack(
    tape: &mut Tape,
    stack: &AugmentStack,
    x: &Tensor,
    delta: Var,
    ctx: &AugmentContext,
) -> Result<Var, AugmentError> {
    let s = x.shape();
    if s.len() != 4 || ctx.rows.len() != s[0] {
        return Err(AugmentError::InvalidParam(format!(
            "batch shape {s:?} does not match {} pool rows",
            ctx.rows.len()
        )));
    }
    let image = [s[1], s[2], s[3]];
    let draws = ctx
        .rows
        .iter()
        .map(|&row| sample_draw(stack, image, ctx, row))
        .collect::<Result<Vec<_>, _>>()?;
    apply_draws(tape, stack, x, delta, &draws, ctx.pool)
}

/// Single-kind convenience over [`apply_stack`].
pub fn augment_one(
    tape: &mut Tape,
    kind: AugmentKind,
    params: &AugmentParams,
    x: &Tensor,
    delta: Var,
    ctx: &AugmentContext,
) -> Result<Var, AugmentError> {
    let stack = AugmentStack::new([kind], params.clone())?;
    apply_stack(tape, &stack, x, delta, ctx)
}
