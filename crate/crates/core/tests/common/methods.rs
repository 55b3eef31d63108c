//! Independent oracles for backward hooks, feature losses and backprop parity.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use tabench::attack::{run_attack_with, AttackOptions, AttackSpec};
use tabench::engine::{EngineError, Tape, Tensor, Var};
use tabench::methods::{feature_loss, install_backward_method, Aggregates, MethodKind, MethodParams};
use tabench::models::{build_model, cross_entropy_per_example, ArchKind, ForwardOptions, Model, ModelSpec};
use tabench::rng;

pub fn resnet2() -> Model {
    let spec = ModelSpec::new(ArchKind::ToyResnet).with_input(16, 16).with_width(4).with_depth(2).with_classes(5);
    build_model(&spec, 8).unwrap()
}

pub fn rand_tensor(shape: &[usize], seed: &[u64], lo: f64, hi: f64) -> Tensor {
    let mut r = rng::stream(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

type ReluFn<'a> = &'a dyn Fn(&mut Tape, Var, usize) -> Result<Var, EngineError>;
type BranchFn<'a> = &'a dyn Fn(&mut Tape, Var) -> Result<Var, EngineError>;

/// toy_resnet written out from primitives. `relu(t, x, block)` is called with block 0 for the stem.
fn resnet_by_hand(model: &Model, t: &mut Tape, x: Var, relu: ReluFn, branch: BranchFn) -> Result<Var, EngineError> {
    let p: Vec<Var> = model.params().iter().map(|w| t.constant(w.clone())).collect::<Result<_, _>>()?;
    let h = t.conv2d(x, p[0], Some(p[1]), 1, 1)?;
    let h = relu(t, h, 0)?;
    let mut h = t.max_pool2d(h, 2)?;
    for b in 0..model.spec().depth {
        let k = 2 + 4 * b;
        let r = t.conv2d(h, p[k], Some(p[k + 1]), 1, 1)?;
        let r = relu(t, r, b + 1)?;
        let r = t.conv2d(r, p[k + 2], Some(p[k + 3]), 1, 1)?;
        let r = branch(t, r)?;
        let s = t.add(h, r)?;
        h = relu(t, s, b + 1)?;
    }
    let s = model.spec().input_size;
    let h = t.max_pool2d(h, s.height.min(s.width) / 8)?;
    let sh = t.shape(h).to_vec();
    let h = t.reshape(h, &[sh[0], sh[1] * sh[2] * sh[3]])?;
    let n = p.len();
    let y = t.matmul(h, p[n - 2])?;
    t.add_bias(y, p[n - 1], 1)
}

fn ce_grad_by_hand(model: &Model, x: &Tensor, y: &[usize], relu: ReluFn, branch: BranchFn) -> Tensor {
    let mut t = Tape::new();
    let xv = t.input(x.clone()).unwrap();
    let logits = resnet_by_hand(model, &mut t, xv, relu, branch).unwrap();
    let l = cross_entropy_per_example(&mut t, logits, y).unwrap();
    let s = t.sum(l).unwrap();
    t.backward_scalar(s).unwrap().take(xv).unwrap()
}

fn ce_grad_hooked(model: &Model, params: &MethodParams, x: &Tensor, y: &[usize]) -> (Tensor, Tensor) {
    let mut t = install_backward_method(model, params).unwrap().tape();
    let xv = t.input(x.clone()).unwrap();
    let f = model.forward(&mut t, xv, ForwardOptions::default()).unwrap();
    let logits = t.value(f.logits).clone();
    let l = cross_entropy_per_example(&mut t, f.logits, y).unwrap();
    let s = t.sum(l).unwrap();
    (t.backward_scalar(s).unwrap().take(xv).unwrap(), logits)
}

fn plain_relu(t: &mut Tape, x: Var, _: usize) -> Result<Var, EngineError> {
    t.relu(x)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// Largest |hooked − oracle| SGM gradient over `cases` random batches; the
/// oracle scales each residual branch by γ through `γ·r + (1−γ)·detach(r)`.
pub fn sgm_error(gamma: f64, cases: u64) -> f64 {
    let model = resnet2();
    let params = MethodParams::new(MethodKind::Sgm).with_gamma(gamma);
    let branch = move |t: &mut Tape, r: Var| -> Result<Var, EngineError> {
        let d = t.detach(r)?;
        let a = t.scale(r, gamma)?;
        let b = t.scale(d, 1.0 - gamma)?;
        t.add(a, b)
    };
    (0..cases)
        .map(|c| {
            let x = rand_tensor(&[3, 3, 16, 16], &[0x5C, c], 0.0, 1.0);
            let y = [c as usize % 5, 1, 4];
            let (hooked, _) = ce_grad_hooked(&model, &params, &x, &y);
            max_abs_diff(&hooked, &ce_grad_by_hand(&model, &x, &y, &plain_relu, &branch))
        })
        .fold(0.0, f64::max)
}

/// Largest change a backward method makes to the plain input gradient.
pub fn gradient_shift(params: &MethodParams) -> f64 {
    let model = resnet2();
    let x = rand_tensor(&[2, 3, 16, 16], &[0x5F], 0.0, 1.0);
    let plain = ce_grad_by_hand(&model, &x, &[0, 3], &plain_relu, &|_, r| Ok(r));
    max_abs_diff(&ce_grad_hooked(&model, params, &x, &[0, 3]).0, &plain)
}

/// Largest |hooked − oracle| LinBP gradient; the oracle makes every ReLU in
/// block `layer_index` and later straight-through, `x + detach(relu(x) − x)`.
pub fn linbp_error(layer_index: usize, cases: u64) -> f64 {
    let model = resnet2();
    let params = MethodParams::new(MethodKind::LinBp).with_layer(layer_index);
    let relu = move |t: &mut Tape, x: Var, block: usize| -> Result<Var, EngineError> {
        if block < layer_index {
            return t.relu(x);
        }
        let r = t.relu(x)?;
        let gap = t.sub(r, x)?;
        let gap = t.detach(gap)?;
        t.add(x, gap)
    };
    let identity = |_: &mut Tape, r: Var| Ok(r);
    (0..cases)
        .map(|c| {
            let x = rand_tensor(&[3, 3, 16, 16], &[0x11B, c], 0.0, 1.0);
            let y = [2, c as usize % 5, 0];
            let (hooked, _) = ce_grad_hooked(&model, &params, &x, &y);
            max_abs_diff(&hooked, &ce_grad_by_hand(&model, &x, &y, &relu, &identity))
        })
        .fold(0.0, f64::max)
}

/// True when PNA leaves toy_vit logits bit-identical.
pub fn pna_forward_identical(cases: u64) -> bool {
    let spec = ModelSpec::new(ArchKind::ToyVit).with_input(16, 16).with_width(4).with_depth(2);
    let model = build_model(&spec, 1).unwrap();
    (0..cases).all(|c| {
        let x = rand_tensor(&[2, 3, 16, 16], &[0x9A, c], 0.0, 1.0);
        let (_, hooked) = ce_grad_hooked(&model, &MethodParams::new(MethodKind::Pna), &x, &[0, 1]);
        let mut t = Tape::new();
        let xv = t.constant(x).unwrap();
        let f = model.forward(&mut t, xv, ForwardOptions::default()).unwrap();
        t.value(f.logits).data().iter().map(|v| v.to_bits()).eq(hooked.data().iter().map(|v| v.to_bits()))
    })
}

pub const FEATURE_METHODS: [MethodKind; 7] = [
    MethodKind::Ila,
    MethodKind::IlaPlusPlus,
    MethodKind::Fia,
    MethodKind::Naa,
    MethodKind::Fda,
    MethodKind::Nrdm,
    MethodKind::Tap,
];

fn rows(t: &Tensor) -> Vec<&[f64]> {
    t.data().chunks(t.numel() / t.shape()[0]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// 3×3 same-size mean pool with zero padding (divisor 9), one image `[C, H, W]`.
fn avgpool3(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            s += img[ch * h * w + yy as usize * w + xx as usize];
                        }
                    }
                }
                out[ch * h * w + y * w + x] = s / 9.0;
            }
        }
    }
    out
}

/// Per-example loss recomputed from plain arrays.
fn loss_by_hand(
    p: &MethodParams,
    f: &Tensor,
    agg: &Aggregates,
    delta: &Tensor,
    ce: &[f64],
    mu: &[f64],
) -> Vec<f64> {
    let clean = agg.clean.as_ref().unwrap();
    let ds = delta.shape();
    let (c, h, w) = (ds[1], ds[2], ds[3]);
    let fshape = f.shape();
    let inner: usize = fshape[2..].iter().product();
    rows(f)
        .iter()
        .enumerate()
        .map(|(i, fr)| {
            let cr = rows(clean)[i];
            let diff: Vec<f64> = fr.iter().zip(cr).map(|(a, b)| a - b).collect();
            match p.kind {
                MethodKind::Nrdm => dot(&diff, &diff).sqrt(),
                MethodKind::Ila => dot(&diff, rows(agg.ila_direction.as_ref().unwrap())[i]),
                MethodKind::IlaPlusPlus => dot(&diff, rows(agg.ila_weights.as_ref().unwrap())[i]),
                MethodKind::Fia => -dot(rows(agg.fia_gradient.as_ref().unwrap())[i], fr),
                MethodKind::Naa => {
                    let a = rows(agg.naa_attribution.as_ref().unwrap())[i];
                    let neg: f64 = a.iter().zip(fr.iter()).map(|(&av, &fv)| (-av).max(0.0) * fv).sum();
                    let pos: f64 = a.iter().zip(fr.iter()).map(|(&av, &fv)| av.max(0.0) * fv).sum();
                    neg - pos
                }
                MethodKind::Fda => {
                    let (mut lo, mut hi) = (0.0, 0.0);
                    for (k, &v) in fr.iter().enumerate() {
                        if v < mu[k / inner] {
                            lo += v * v;
                        } else {
                            hi += v * v;
                        }
                    }
                    lo.sqrt().max(1e-12).ln() - hi.sqrt().max(1e-12).ln()
                }
                MethodKind::Tap => {
                    let s = |v: f64| v.signum() * v.abs().powf(p.tap_alpha);
                    let feat: f64 = fr.iter().zip(cr).map(|(a, b)| (s(*b) - s(*a)).powi(2)).sum();
                    let pooled = avgpool3(rows(delta)[i], c, h, w);
                    ce[i] + p.tap_lambda * feat - p.tap_eta * pooled.iter().map(|v| v.abs()).sum::<f64>()
                }
                _ => unreachable!(),
            }
        })
        .collect()
}

/// Largest |library − by-hand| feature loss for `kind` over `cases` random cases.
pub fn feature_loss_error(kind: MethodKind, cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let key = |k: u64| [0xFEA7, kind as u64, c, k];
        let fshape = [3, 4, 5, 5];
        let f = rand_tensor(&fshape, &key(0), -1.0, 2.0);
        let agg = Aggregates {
            clean: Some(rand_tensor(&fshape, &key(1), -1.0, 2.0)),
            ila_direction: Some(rand_tensor(&fshape, &key(2), -1.0, 1.0)),
            ila_weights: Some(rand_tensor(&fshape, &key(3), -1.0, 1.0)),
            fia_gradient: Some(rand_tensor(&fshape, &key(4), -1.0, 1.0)),
            naa_attribution: Some(rand_tensor(&fshape, &key(5), -1.0, 1.0)),
        };
        let delta = rand_tensor(&[3, 3, 6, 6], &key(6), -0.1, 0.1);
        let ce = rand_tensor(&[3], &key(7), 0.0, 3.0);
        let mu = rand_tensor(&[4], &key(8), -0.5, 1.5);
        let params = MethodParams::new(kind);
        let mut t = Tape::new();
        let fv = t.input(f.clone()).unwrap();
        let dv = t.input(delta.clone()).unwrap();
        let cv = t.constant(ce.clone()).unwrap();
        let out = feature_loss(&params, &mut t, fv, dv, Some(cv), &agg, Some(mu.data())).unwrap();
        let got = t.value(out).data().to_vec();
        let want = loss_by_hand(&params, &f, &agg, &delta, ce.data(), mu.data());
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}

/// Backprops per iteration for `kind` on a small attack.
pub fn backprops_per_iteration(kind: MethodKind, n_agg: usize) -> usize {
    let model = resnet2();
    let x = rand_tensor(&[2, 3, 16, 16], &[0xBC], 0.0, 1.0);
    let iterations = 3;
    let spec = AttackSpec {
        iterations,
        method: Some(MethodParams::new(kind).with_n_agg(n_agg)),
        ..AttackSpec::linf()
    };
    let counter = Arc::new(AtomicUsize::new(0));
    let opts = AttackOptions { stats: None, backprop_counter: Some(counter.clone()) };
    run_attack_with(&[model], &x, &[0, 1], &spec, &opts).unwrap();
    counter.load(Ordering::SeqCst) / iterations
}
