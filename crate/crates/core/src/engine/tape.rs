use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::hooks::{BackwardMod, HookRegistry};
use super::kernels::{self, ConvGeom, ROW_MAJOR, TRANSPOSED};
use super::{EngineError, Tensor};

type Accumulate<'a> = dyn FnMut(Var, &mut dyn FnMut(&mut [f64])) + 'a;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias { x: Var, bias: Var, axis: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { x: Var },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_c: usize },
    Relu { x: Var, hook: Option<BackwardMod> },
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    SignPow { x: Var, p: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Select { mask: Vec<bool>, a: Var, b: Var },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanAxis { x: Var, axis: usize },
    NormRows(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPoolSame { x: Var, k: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Pick { x: Var, index: Vec<usize> },
    Resize { x: Var },
    Pad { x: Var, top: usize, left: usize },
    Translate { x: Var, dy: isize, dx: isize },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Tap { x: Var, hook: Option<BackwardMod> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use record of one forward pass, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    hooks: HookRegistry,
    captures: BTreeMap<String, Var>,
    consumed: bool,
    counter: Option<Arc<AtomicUsize>>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), EngineError> {
    if t.ndim() != rank {
        return Err(EngineError::invalid(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_hooks(hooks: HookRegistry) -> Self {
        Self { hooks, ..Self::default() }
    }

    /// Attach a counter incremented once per backward pass.
    pub fn counting(mut self, counter: Arc<AtomicUsize>) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn hooks(&self) -> &HookRegistry {
        &self.hooks
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded non-leaf nodes.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn captured(&self, label: &str) -> Option<Var> {
        self.captures.get(label).copied()
    }

    /// Detached copy of a captured forward value.
    pub fn captured_value(&self, label: &str) -> Option<Tensor> {
        self.captured(label).map(|v| self.value(v).clone())
    }

    pub fn captured_labels(&self) -> impl Iterator<Item = &str> {
        self.captures.keys().map(String::as_str)
    }

    /// Smallest distance of any recorded non-smooth op from its kink.
    ///
    /// Covers ReLU and |·| arguments, clamp bounds, max-pool ties (other than
    /// all-zero windows) and zero norms. Finite differences with step `h` are trustworthy when this
    /// exceeds a small multiple of `h`.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x, .. } | Op::Abs(x) | Op::SignPow { x, .. } => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for v in self.value(*x).data() {
                        margin = margin.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                Op::NormRows(_) => {
                    for v in node.value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let s = self.shape(*x);
                    let (h, w) = (s[2], s[3]);
                    let k = h / node.value.shape()[2];
                    let xv = self.value(*x).data();
                    for &best in argmax {
                        let plane = best / (h * w);
                        let (by, bx) = ((best % (h * w)) / w, best % w);
                        let (y0, x0) = (by / k * k, bx / k * k);
                        for yy in y0..y0 + k {
                            for xx in x0..x0 + k {
                                let idx = plane * h * w + yy * w + xx;
                                // Exact zero ties come from inactive ReLUs, whose own margin is checked.
                                if idx != best && !(xv[best] == 0.0 && xv[idx] == 0.0) {
                                    margin = margin.min(xv[best] - xv[idx]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, EngineError> {
        if self.consumed {
            return Err(EngineError::TapeReused);
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Result<Var, EngineError> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, EngineError> {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `x`'s value as a new constant leaf.
    pub fn detach(&mut self, x: Var) -> Result<Var, EngineError> {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        if self.shape(a) != self.shape(b) {
            return Err(EngineError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, EngineError> {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, EngineError> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, EngineError> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Adds a rank-1 `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, EngineError> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if axis >= xs.len() || bs != [xs[axis]] {
            return Err(EngineError::shape("add_bias", &xs, &bs));
        }
        let (outer, dim, inner) = split_axis(&xs, axis);
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        let d = out.data_mut();
        for o in 0..outer {
            for (c, &bv) in b.iter().enumerate().take(dim) {
                let base = (o * dim + c) * inner;
                d[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddBias { x, bias, axis }, rg)
    }

    /// `a[..., k] · b[k, n]`, flattening the leading axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(EngineError::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), ROW_MAJOR(k), self.value(b).data(), ROW_MAJOR(n), 0.0, &mut out);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Batched `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(EngineError::shape("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                ROW_MAJOR(k),
                &bv[i * k * n..(i + 1) * k * n],
                ROW_MAJOR(n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![batch, m, n], out)?, Op::Bmm { a, b, batch, m, k, n }, rg)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(EngineError::invalid("transpose_last2", format!("rank < 2: {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.value(x).data(), r, c);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::TransposeLast2 { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, EngineError> {
        let out = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| EngineError::shape("reshape", self.shape(x), shape))?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// 2-D convolution of `x[N, C, H, W]` with `w[O, C, k, k]` and optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, EngineError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(EngineError::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(EngineError::shape("conv2d bias", self.shape(b), &[ws[0]]));
            }
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| EngineError::shape("conv2d", &xs, &ws))?;
        let (n, o) = (xs[0], ws[0]);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let img_len = xs[1] * xs[2] * xs[3];
        let mut out = vec![0.0; n * o * cols];
        let mut col = vec![0.0; rows * cols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            kernels::im2col(&xv[i * img_len..(i + 1) * img_len], &geom, &mut col);
            kernels::gemm(o, rows, cols, wv, ROW_MAJOR(rows), &col, ROW_MAJOR(cols), 0.0, &mut out[i * o * cols..(i + 1) * o * cols]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (ch, chunk) in out.chunks_mut(cols).enumerate() {
                let bias = bv[ch % o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let t = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom, out_c: o }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(x, |v| v.max(0.0), Op::Relu { x, hook: None })
    }

    /// ReLU addressable by hooks under `label`.
    pub fn relu_labeled(&mut self, x: Var, label: &str) -> Result<Var, EngineError> {
        let hook = self.hooks.backward_mod(label).filter(|m| {
            matches!(m, BackwardMod::IdentityRelu | BackwardMod::SoftplusRelu)
        });
        let out = self.unary(x, |v| v.max(0.0), Op::Relu { x, hook })?;
        if self.hooks.captures(label) {
            self.captures.insert(label.to_string(), out);
        }
        Ok(out)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, EngineError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(EngineError::invalid("log", "non-positive argument".to_string()));
        }
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, EngineError> {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `sign(x)·|x|^p`; the derivative at exactly zero is taken as zero.
    pub fn sign_pow(&mut self, x: Var, p: f64) -> Result<Var, EngineError> {
        self.unary(x, |v| v.signum() * v.abs().powf(p) * (v != 0.0) as u8 as f64, Op::SignPow { x, p })
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, EngineError> {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `mask ? a : b` elementwise.
    pub fn select(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("select", a, b)?;
        if mask.len() != self.value(a).numel() {
            return Err(EngineError::shape("select", &[mask.len()], self.shape(a)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = mask.iter().zip(av.iter().zip(bv)).map(|(&m, (&x, &y))| if m { x } else { y }).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Select { mask, a, b }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, EngineError> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, EngineError> {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, EngineError> {
        let t = self.value(x);
        let n = t.shape()[0];
        let inner = t.numel() / n;
        let data = t.data().chunks(inner).map(|c| c.iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n], data)?, Op::SumRows(x), rg)
    }

    /// Per-row ℓ₂ norm `[N, ...] -> [N]`; the gradient at a zero row is zero.
    pub fn norm_rows(&mut self, x: Var) -> Result<Var, EngineError> {
        let t = self.value(x);
        let n = t.shape()[0];
        let inner = t.numel() / n;
        let data = t.data().chunks(inner).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n], data)?, Op::NormRows(x), rg)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(EngineError::invalid("mean_axis", format!("axis {axis} for shape {s:?}")));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xv[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        out.iter_mut().for_each(|v| *v /= dim as f64);
        let mut shape = s.clone();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, rg)
    }

    /// Non-overlapping `k×k` max-pool over `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        expect_rank("max_pool2d", self.value(x), 4)?;
        let (oh, ow) = (s[2] / k, s[3] / k);
        if k == 0 || oh == 0 || ow == 0 {
            return Err(EngineError::invalid("max_pool2d", format!("kernel {k} for shape {s:?}")));
        }
        let planes = s[0] * s[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * s[2] * s[3];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * s[3] + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * s[3] + ox * k + dx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![s[0], s[1], oh, ow], out)?, Op::MaxPool { x, argmax }, rg)
    }

    /// `k×k` average pool, stride 1, zero padding `k/2`, divisor `k²`.
    pub fn avg_pool_same(&mut self, x: Var, k: usize) -> Result<Var, EngineError> {
        expect_rank("avg_pool_same", self.value(x), 4)?;
        if k.is_multiple_of(2) {
            return Err(EngineError::invalid("avg_pool_same", format!("kernel {k} must be odd")));
        }
        let out = box_filter(self.value(x), k);
        let rg = self.rg(&[x]);
        self.push(out, Op::AvgPoolSame { x, k }, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(EngineError::shape("layer_norm", &s, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::new(s, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, EngineError> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, EngineError> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x), rg)
    }

    /// Gathers `x[i, index[i]]` from a `[N, K]` tensor.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != index.len() {
            return Err(EngineError::shape("pick", &s, &[index.len()]));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= s[1]) {
            return Err(EngineError::invalid("pick", format!("index {bad} out of range for {} classes", s[1])));
        }
        let xv = self.value(x).data();
        let data = index.iter().enumerate().map(|(r, &c)| xv[r * s[1] + c]).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![s[0]], data)?, Op::Pick { x, index: index.to_vec() }, rg)
    }

    /// Half-pixel bilinear resize of `[N, C, H, W]` to `[N, C, oh, ow]`.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        expect_rank("resize_bilinear", self.value(x), 4)?;
        if oh == 0 || ow == 0 {
            return Err(EngineError::invalid("resize_bilinear", "zero target size".to_string()));
        }
        let out = kernels::resize_bilinear(self.value(x).data(), s[0] * s[1], s[2], s[3], oh, ow);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![s[0], s[1], oh, ow], out)?, Op::Resize { x }, rg)
    }

    /// Zero padding of the two spatial axes of `[N, C, H, W]`.
    pub fn pad2d(&mut self, x: Var, top: usize, left: usize, bottom: usize, right: usize) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        expect_rank("pad2d", self.value(x), 4)?;
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let xv = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        for p in 0..s[0] * s[1] {
            for y in 0..h {
                let src = &xv[(p * h + y) * w..(p * h + y + 1) * w];
                let d0 = (p * oh + y + top) * ow + left;
                out[d0..d0 + w].copy_from_slice(src);
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![s[0], s[1], oh, ow], out)?, Op::Pad { x, top, left }, rg)
    }

    /// Integer spatial shift: `out[y, x] = in[y − dy, x − dx]`, zero-filled.
    pub fn translate(&mut self, x: Var, dy: isize, dx: isize) -> Result<Var, EngineError> {
        expect_rank("translate", self.value(x), 4)?;
        let out = shift_planes(self.value(x), dy, dx);
        let rg = self.rg(&[x]);
        self.push(out, Op::Translate { x, dy, dx }, rg)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(EngineError::invalid("slice", format!("{start}+{len} on axis {axis} of {s:?}")));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, EngineError> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(EngineError::invalid("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(EngineError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Identity node addressable by hooks under `label`.
    pub fn tap(&mut self, x: Var, label: &str) -> Result<Var, EngineError> {
        let hook = self
            .hooks
            .backward_mod(label)
            .filter(|m| matches!(m, BackwardMod::Scale(_) | BackwardMod::Stop));
        let out = self.value(x).clone();
        let rg = self.rg(&[x]);
        let v = self.push(out, Op::Tap { x, hook }, rg)?;
        if self.hooks.captures(label) {
            self.captures.insert(label.to_string(), v);
        }
        Ok(v)
    }

    /// Reverse-mode sweep from `output`, seeded with `seed`.
    pub fn backward(&mut self, output: Var, seed: Tensor) -> Result<Gradients, EngineError> {
        if self.consumed {
            return Err(EngineError::TapeReused);
        }
        if seed.shape() != self.shape(output) {
            return Err(EngineError::shape("backward seed", seed.shape(), self.shape(output)));
        }
        self.consumed = true;
        if let Some(c) = &self.counter {
            c.fetch_add(1, Ordering::Relaxed);
        }
        let mut store = GradStore { grads: (0..self.nodes.len()).map(|_| None).collect() };
        store.grads[output.0] = Some(seed.into_data());
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = store.grads[id].take() else { continue };
            self.backward_node(node, &g, &mut store);
            store.grads[id] = Some(g);
        }
        let grads = store
            .grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    /// Convenience: backward from a scalar output with seed 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<Gradients, EngineError> {
        let shape = self.shape(output).to_vec();
        self.backward(output, Tensor::ones(&shape))
    }

    fn backward_node(&self, node: &Node, g: &[f64], st: &mut GradStore) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = st.grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        let elementwise = |acc: &mut Accumulate, x: Var, d: &dyn Fn(usize) -> f64| {
            acc(x, &mut |buf| buf.iter_mut().enumerate().for_each(|(i, b)| *b += g[i] * d(i)));
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |buf| buf.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * bv[i]));
                acc(*b, &mut |buf| buf.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * av[i]));
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, y)| *b += c * y)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::AddBias { x, bias, axis } => {
                acc(*x, &mut |buf| add_into(buf, g));
                let (outer, dim, inner) = split_axis(shp(*x), *axis);
                acc(*bias, &mut |buf| {
                    for o in 0..outer {
                        for (c, b) in buf.iter_mut().enumerate().take(dim) {
                            let base = (o * dim + c) * inner;
                            *b += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |buf| kernels::gemm(m, n, k, g, ROW_MAJOR(n), bv, TRANSPOSED(n), 1.0, buf));
                acc(*b, &mut |buf| kernels::gemm(k, m, n, av, TRANSPOSED(k), g, ROW_MAJOR(n), 1.0, buf));
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for i in 0..*batch {
                        kernels::gemm(m, n, k, &g[i * m * n..], ROW_MAJOR(n), &bv[i * k * n..], TRANSPOSED(n), 1.0, &mut buf[i * m * k..(i + 1) * m * k]);
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..*batch {
                        kernels::gemm(k, m, n, &av[i * m * k..], TRANSPOSED(k), &g[i * m * n..], ROW_MAJOR(n), 1.0, &mut buf[i * k * n..(i + 1) * k * n]);
                    }
                });
            }
            Op::TransposeLast2 { x } => {
                let s = shp(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_blocks(g, c, r);
                acc(*x, &mut |buf| add_into(buf, &back));
            }
            Op::Conv2d { x, w, b, geom, out_c } => {
                let o = *out_c;
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let n = shp(*x)[0];
                let img_len = geom.c * geom.h * geom.w;
                let (xv, wv) = (val(*x), val(*w));
                let need_x = nodes[x.0].requires_grad;
                let need_w = nodes[w.0].requires_grad;
                let mut col = vec![0.0; rows * cols];
                let mut dcol = vec![0.0; rows * cols];
                let mut dw = if need_w { vec![0.0; o * rows] } else { Vec::new() };
                let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                for i in 0..n {
                    let gi = &g[i * o * cols..(i + 1) * o * cols];
                    if need_w {
                        kernels::im2col(&xv[i * img_len..(i + 1) * img_len], geom, &mut col);
                        kernels::gemm(o, cols, rows, gi, ROW_MAJOR(cols), &col, TRANSPOSED(cols), 1.0, &mut dw);
                    }
                    if need_x {
                        kernels::gemm(rows, o, cols, wv, TRANSPOSED(rows), gi, ROW_MAJOR(cols), 0.0, &mut dcol);
                        kernels::col2im(&dcol, geom, &mut dx[i * img_len..(i + 1) * img_len]);
                    }
                }
                if need_x {
                    acc(*x, &mut |buf| add_into(buf, &dx));
                }
                if need_w {
                    acc(*w, &mut |buf| add_into(buf, &dw));
                }
                if let Some(b) = b {
                    acc(*b, &mut |buf| {
                        for (ch, chunk) in g.chunks(cols).enumerate() {
                            buf[ch % o] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Relu { x, hook } => {
                let xv = val(*x);
                match hook {
                    Some(BackwardMod::IdentityRelu) => acc(*x, &mut |buf| add_into(buf, g)),
                    Some(BackwardMod::SoftplusRelu) => {
                        elementwise(&mut acc, *x, &|i| kernels::sigmoid(xv[i]))
                    }
                    _ => elementwise(&mut acc, *x, &|i| if xv[i] > 0.0 { 1.0 } else { 0.0 }),
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                elementwise(&mut acc, *x, &|i| kernels::gelu_grad(xv[i]));
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                elementwise(&mut acc, *x, &|i| kernels::sigmoid(xv[i]));
            }
            Op::Exp(x) => {
                let ov = node.value.data();
                elementwise(&mut acc, *x, &|i| ov[i]);
            }
            Op::Log(x) => {
                let xv = val(*x);
                elementwise(&mut acc, *x, &|i| 1.0 / xv[i]);
            }
            Op::Abs(x) => {
                let xv = val(*x);
                elementwise(&mut acc, *x, &|i| if xv[i] == 0.0 { 0.0 } else { xv[i].signum() });
            }
            Op::SignPow { x, p } => {
                let xv = val(*x);
                let p = *p;
                elementwise(&mut acc, *x, &|i| if xv[i] == 0.0 { 0.0 } else { p * xv[i].abs().powf(p - 1.0) });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                elementwise(&mut acc, *x, &|i| if xv[i] >= *lo && xv[i] <= *hi { 1.0 } else { 0.0 });
            }
            Op::Select { mask, a, b } => {
                acc(*a, &mut |buf| buf.iter_mut().enumerate().for_each(|(i, v)| if mask[i] { *v += g[i] }));
                acc(*b, &mut |buf| buf.iter_mut().enumerate().for_each(|(i, v)| if !mask[i] { *v += g[i] }));
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |buf| buf.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SumRows(x) => {
                let inner = nodes[x.0].value.numel() / g.len();
                acc(*x, &mut |buf| buf.iter_mut().enumerate().for_each(|(i, v)| *v += g[i / inner]));
            }
            Op::NormRows(x) => {
                let xv = val(*x);
                let inner = xv.len() / g.len();
                let norms = node.value.data();
                acc(*x, &mut |buf| {
                    buf.iter_mut().enumerate().for_each(|(i, v)| {
                        let r = i / inner;
                        if norms[r] > 0.0 {
                            *v += g[r] * xv[i] / norms[r];
                        }
                    })
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, dim, inner) = split_axis(shp(*x), *axis);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for d in 0..dim {
                            let dst = &mut buf[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b / dim as f64);
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, &mut |buf| argmax.iter().zip(g).for_each(|(&i, v)| buf[i] += v));
            }
            Op::AvgPoolSame { x, k } => {
                // The zero-padded box filter is self-adjoint.
                let gt = Tensor::new(shp(*x).to_vec(), g.to_vec()).expect("shape");
                let back = box_filter(&gt, *k);
                acc(*x, &mut |buf| add_into(buf, back.data()));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *shp(*x).last().unwrap();
                let gv = val(*gamma);
                acc(*gamma, &mut |buf| {
                    for r in 0..rstd.len() {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for r in 0..rstd.len() {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
                acc(*x, &mut |buf| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gh: Vec<f64> = (0..d).map(|j| g[r * d + j] * gv[j]).collect();
                        let h = &xhat[r * d..(r + 1) * d];
                        let m1 = gh.iter().sum::<f64>() / d as f64;
                        let m2 = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            buf[r * d + j] += rs * (gh[j] - m1 - h[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let s = node.value.data();
                let d = *shp(*x).last().unwrap();
                acc(*x, &mut |buf| {
                    for (r, row) in s.chunks(d).enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            buf[r * d + j] += row[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let ls = node.value.data();
                let d = *shp(*x).last().unwrap();
                acc(*x, &mut |buf| {
                    for (r, row) in ls.chunks(d).enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let gs: f64 = gr.iter().sum();
                        for j in 0..d {
                            buf[r * d + j] += gr[j] - row[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Pick { x, index } => {
                let k = shp(*x)[1];
                acc(*x, &mut |buf| index.iter().enumerate().for_each(|(r, &c)| buf[r * k + c] += g[r]));
            }
            Op::Resize { x } => {
                let s = shp(*x);
                let os = node.value.shape();
                acc(*x, &mut |buf| kernels::resize_bilinear_adjoint(g, s[0] * s[1], s[2], s[3], os[2], os[3], buf));
            }
            Op::Pad { x, top, left } => {
                let s = shp(*x);
                let os = node.value.shape();
                let (h, w, oh, ow) = (s[2], s[3], os[2], os[3]);
                acc(*x, &mut |buf| {
                    for p in 0..s[0] * s[1] {
                        for y in 0..h {
                            let d0 = (p * oh + y + top) * ow + left;
                            let dst = &mut buf[(p * h + y) * w..(p * h + y + 1) * w];
                            dst.iter_mut().zip(&g[d0..d0 + w]).for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            Op::Translate { x, dy, dx } => {
                let gt = Tensor::new(shp(*x).to_vec(), g.to_vec()).expect("shape");
                let back = shift_planes(&gt, -dy, -dx);
                acc(*x, &mut |buf| add_into(buf, back.data()));
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = split_axis(shp(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        let dst = &mut buf[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let d = shp(p)[*axis];
                    acc(p, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            add_into(&mut buf[o * d * inner..(o + 1) * d * inner], src);
                        }
                    });
                    offset += d;
                }
            }
            Op::Tap { x, hook } => match hook {
                Some(BackwardMod::Stop) => {}
                Some(BackwardMod::Scale(gamma)) => {
                    acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, v)| *b += gamma * v))
                }
                _ => acc(*x, &mut |buf| add_into(buf, g)),
            },
        }
    }
}

struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn transpose_blocks(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (blk, src) in data.chunks(r * c).enumerate() {
        let dst = &mut out[blk * r * c..(blk + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn box_filter(t: &Tensor, k: usize) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let r = (k / 2) as isize;
    let norm = 1.0 / (k * k) as f64;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..s[0] * s[1] {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                    for xx in (x - r).max(0)..(x + r + 1).min(w as isize) {
                        acc += plane[yy as usize * w + xx as usize];
                    }
                }
                out[p * h * w + y as usize * w + x as usize] = acc * norm;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("shape")
}

fn shift_planes(t: &Tensor, dy: isize, dx: isize) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[2] as isize, s[3] as isize);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    let plane = (h * w) as usize;
    for p in 0..s[0] * s[1] {
        for y in 0..h {
            let sy = y - dy;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if sx >= 0 && sx < w {
                    out[p * plane + (y * w + x) as usize] = src[p * plane + (sy * w + sx) as usize];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("shape")
}
