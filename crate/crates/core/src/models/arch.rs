use crate::engine::{EngineError, Tape, Var};

use super::spec::{ArchKind, ModelSpec, PATCH};

/// Sequential view over the bound parameter vars, in layout order.
pub(crate) struct Params<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> Params<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, next: 0 }
    }

    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }

    fn pair(&mut self) -> (Var, Var) {
        (self.take(), self.take())
    }
}

fn linear(t: &mut Tape, x: Var, p: &mut Params) -> Result<Var, EngineError> {
    let (w, b) = p.pair();
    let y = t.matmul(x, w)?;
    let axis = t.shape(y).len() - 1;
    t.add_bias(y, b, axis)
}

fn conv(t: &mut Tape, x: Var, p: &mut Params, stride: usize, pad: usize) -> Result<Var, EngineError> {
    let (w, b) = p.pair();
    t.conv2d(x, w, Some(b), stride, pad)
}

fn layer_norm(t: &mut Tape, x: Var, p: &mut Params) -> Result<Var, EngineError> {
    let (g, b) = p.pair();
    t.layer_norm(x, g, b, 1e-5)
}

/// Repeats a `[1, ...]` var `n` times along axis 0.
fn tile(t: &mut Tape, x: Var, n: usize) -> Result<Var, EngineError> {
    if n == 1 {
        return Ok(x);
    }
    t.concat(&vec![x; n], 0)
}

pub(crate) struct ArchOutput {
    pub logits: Var,
    pub block_logits: Vec<Var>,
}

pub(crate) fn forward(
    spec: &ModelSpec,
    t: &mut Tape,
    x: Var,
    params: &[Var],
    block_logits: bool,
) -> Result<ArchOutput, EngineError> {
    let mut p = Params::new(params);
    match spec.arch {
        ArchKind::ToyCnn => cnn(spec, t, x, &mut p),
        ArchKind::ToyResnet => resnet(spec, t, x, &mut p),
        ArchKind::ToyVit => vit(spec, t, x, &mut p, block_logits),
        ArchKind::ToyMixer => mixer(spec, t, x, &mut p),
    }
}

fn cnn(spec: &ModelSpec, t: &mut Tape, x: Var, p: &mut Params) -> Result<ArchOutput, EngineError> {
    let mut h = x;
    for i in 1..=spec.depth {
        h = conv(t, h, p, 1, 1)?;
        h = t.relu_labeled(h, &format!("block{i}.relu"))?;
        h = t.max_pool2d(h, 2)?;
        h = t.tap(h, &format!("block{i}.out"))?;
    }
    let n = t.shape(h)[0];
    let flat = t.value(h).numel() / n;
    let h = t.reshape(h, &[n, flat])?;
    let logits = linear(t, h, p)?;
    Ok(ArchOutput { logits, block_logits: Vec::new() })
}

fn resnet(spec: &ModelSpec, t: &mut Tape, x: Var, p: &mut Params) -> Result<ArchOutput, EngineError> {
    let h = conv(t, x, p, 1, 1)?;
    let h = t.relu_labeled(h, "stem.relu")?;
    let h = t.max_pool2d(h, 2)?;
    let mut h = t.tap(h, "stem.out")?;
    for i in 1..=spec.depth {
        let r = conv(t, h, p, 1, 1)?;
        let r = t.relu_labeled(r, &format!("block{i}.relu1"))?;
        let r = conv(t, r, p, 1, 1)?;
        let r = t.tap(r, &format!("block{i}.skip"))?;
        let s = t.add(h, r)?;
        let s = t.relu_labeled(s, &format!("block{i}.relu2"))?;
        h = t.tap(s, &format!("block{i}.out"))?;
    }
    let h = t.max_pool2d(h, spec.resnet_pool())?;
    let s = t.shape(h).to_vec();
    let h = t.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
    let logits = linear(t, h, p)?;
    Ok(ArchOutput { logits, block_logits: Vec::new() })
}

/// Patch embedding: `[N, 3, H, W] -> [N, T, D]`.
fn patchify(t: &mut Tape, x: Var, p: &mut Params) -> Result<Var, EngineError> {
    let e = conv(t, x, p, PATCH, 0)?;
    let s = t.shape(e).to_vec();
    let e = t.reshape(e, &[s[0], s[1], s[2] * s[3]])?;
    t.transpose_last2(e)
}

fn vit(
    spec: &ModelSpec,
    t: &mut Tape,
    x: Var,
    p: &mut Params,
    want_block_logits: bool,
) -> Result<ArchOutput, EngineError> {
    let n = t.shape(x)[0];
    let d = spec.embed_dim();
    let tokens = patchify(t, x, p)?;
    let cls = p.take();
    let pos = p.take();
    let cls = tile(t, cls, n)?;
    let h = t.concat(&[cls, tokens], 1)?;
    let pos = tile(t, pos, n)?;
    let h = t.add(h, pos)?;
    let mut h = t.tap(h, "embed.out")?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::new();
    for i in 1..=spec.depth {
        let a = layer_norm(t, h, p)?;
        let q = linear(t, a, p)?;
        let k = linear(t, a, p)?;
        let v = linear(t, a, p)?;
        let kt = t.transpose_last2(k)?;
        let scores = t.bmm(q, kt)?;
        let scores = t.scale(scores, scale)?;
        let weights = t.softmax(scores)?;
        let weights = t.tap(weights, &format!("block{i}.attn.weights"))?;
        let ctx = t.bmm(weights, v)?;
        let o = linear(t, ctx, p)?;
        let o = t.tap(o, &format!("block{i}.attn.skip"))?;
        h = t.add(h, o)?;
        let m = layer_norm(t, h, p)?;
        let m = linear(t, m, p)?;
        let m = t.gelu(m)?;
        let m = linear(t, m, p)?;
        let m = t.tap(m, &format!("block{i}.mlp.skip"))?;
        h = t.add(h, m)?;
        h = t.tap(h, &format!("block{i}.out"))?;
        outs.push(h);
    }
    let (ln_g, ln_b) = p.pair();
    let (head_w, head_b) = p.pair();
    let classify = |t: &mut Tape, h: Var| -> Result<Var, EngineError> {
        let z = t.layer_norm(h, ln_g, ln_b, 1e-5)?;
        let c = t.slice(z, 1, 0, 1)?;
        let c = t.reshape(c, &[n, d])?;
        let y = t.matmul(c, head_w)?;
        t.add_bias(y, head_b, 1)
    };
    let logits = classify(t, h)?;
    let mut block_logits = Vec::new();
    if want_block_logits {
        for &o in &outs[..outs.len() - 1] {
            block_logits.push(classify(t, o)?);
        }
        block_logits.push(logits);
    }
    Ok(ArchOutput { logits, block_logits })
}

fn mixer(spec: &ModelSpec, t: &mut Tape, x: Var, p: &mut Params) -> Result<ArchOutput, EngineError> {
    let tokens = patchify(t, x, p)?;
    let mut h = t.tap(tokens, "embed.out")?;
    for i in 1..=spec.depth {
        let a = layer_norm(t, h, p)?;
        let a = t.transpose_last2(a)?;
        let a = linear(t, a, p)?;
        let a = t.gelu(a)?;
        let a = linear(t, a, p)?;
        let a = t.transpose_last2(a)?;
        let a = t.tap(a, &format!("block{i}.token.skip"))?;
        h = t.add(h, a)?;
        let c = layer_norm(t, h, p)?;
        let c = linear(t, c, p)?;
        let c = t.gelu(c)?;
        let c = linear(t, c, p)?;
        let c = t.tap(c, &format!("block{i}.channel.skip"))?;
        h = t.add(h, c)?;
        h = t.tap(h, &format!("block{i}.out"))?;
    }
    let z = layer_norm(t, h, p)?;
    let z = t.mean_axis(z, 1)?;
    let logits = linear(t, z, p)?;
    Ok(ArchOutput { logits, block_logits: Vec::new() })
}
