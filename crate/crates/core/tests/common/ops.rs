//! Primitive-op gradient cases shared by the engine tests and the acceptance suite.

use rand::Rng;
use tabench::engine::{check_gradient, EngineError, Tape, Tensor, Var};
use tabench::rng;

pub type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, EngineError>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub positive: bool,
    pub graph: Graph,
}

/// Contracts `out` with a fixed pseudo-random weight tensor so that every
/// output coordinate contributes an O(1) gradient.
pub fn project(tape: &mut Tape, out: Var, tag: u64) -> Result<Var, EngineError> {
    let shape = tape.shape(out).to_vec();
    let mut r = rng::stream(&[0xC0FFEE, tag]);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..1.5) * if r.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let w = tape.constant(Tensor::new(shape, w)?)?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    positive: bool,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, EngineError> + 'static,
) -> OpCase {
    let tag = rng::key_digest(&name.bytes().map(u64::from).collect::<Vec<_>>());
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive,
        graph: Box::new(move |t, v| {
            let out = f(t, v)?;
            project(t, out, tag)
        }),
    }
}

pub fn primitive_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[2, 3], &[2, 3]], false, |t, v| t.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], false, |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], false, |t, v| t.mul(v[0], v[1])),
        case("scalar_mul", &[&[5]], false, |t, v| t.scale(v[0], -1.7)),
        case("add_bias", &[&[2, 3, 2], &[3]], false, |t, v| t.add_bias(v[0], v[1], 1)),
        case("matmul", &[&[2, 3, 4], &[4, 5]], false, |t, v| t.matmul(v[0], v[1])),
        case("bmm", &[&[2, 3, 4], &[2, 4, 2]], false, |t, v| t.bmm(v[0], v[1])),
        case("transpose", &[&[2, 3, 4]], false, |t, v| t.transpose_last2(v[0])),
        case("conv2d", &[&[1, 1, 8, 8], &[2, 1, 3, 3], &[2]], false, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case("conv2d_stride", &[&[2, 2, 7, 6], &[3, 2, 3, 3]], false, |t, v| t.conv2d(v[0], v[1], None, 2, 1)),
        case("conv2d_patch", &[&[1, 3, 8, 8], &[4, 3, 4, 4], &[4]], false, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 4, 0)
        }),
        case("relu", &[&[3, 4]], false, |t, v| t.relu(v[0])),
        case("gelu", &[&[3, 4]], false, |t, v| t.gelu(v[0])),
        case("softplus", &[&[3, 4]], false, |t, v| t.softplus(v[0])),
        case("exp", &[&[3, 4]], false, |t, v| t.exp(v[0])),
        case("log", &[&[3, 4]], true, |t, v| t.log(v[0])),
        case("abs", &[&[3, 4]], false, |t, v| t.abs(v[0])),
        case("sign_pow", &[&[3, 4]], false, |t, v| t.sign_pow(v[0], 0.5)),
        case("mean", &[&[3, 4]], false, |t, v| {
            let s = t.mul(v[0], v[0])?;
            t.mean(s)
        }),
        case("sum", &[&[3, 4]], false, |t, v| {
            let s = t.exp(v[0])?;
            t.sum(s)
        }),
        case("sum_rows", &[&[3, 2, 2]], false, |t, v| t.sum_rows(v[0])),
        case("norm_rows", &[&[3, 4]], false, |t, v| t.norm_rows(v[0])),
        case("mean_axis", &[&[2, 3, 4]], false, |t, v| t.mean_axis(v[0], 1)),
        case("max_pool", &[&[1, 2, 4, 4]], false, |t, v| t.max_pool2d(v[0], 2)),
        case("avg_pool_same", &[&[1, 2, 5, 4]], false, |t, v| t.avg_pool_same(v[0], 3)),
        case("layer_norm", &[&[3, 5], &[5], &[5]], false, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("softmax", &[&[3, 5]], false, |t, v| t.softmax(v[0])),
        case("log_softmax", &[&[3, 5]], false, |t, v| t.log_softmax(v[0])),
        case("pick", &[&[3, 4]], false, |t, v| t.pick(v[0], &[1, 3, 0])),
        case("resize_up", &[&[1, 2, 3, 4]], false, |t, v| t.resize_bilinear(v[0], 5, 7)),
        case("resize_down", &[&[1, 1, 8, 8]], false, |t, v| t.resize_bilinear(v[0], 5, 3)),
        case("pad", &[&[1, 2, 3, 3]], false, |t, v| t.pad2d(v[0], 1, 2, 0, 1)),
        case("translate", &[&[1, 2, 4, 5]], false, |t, v| t.translate(v[0], 1, -2)),
        case("select", &[&[2, 3], &[2, 3]], false, |t, v| {
            t.select(vec![true, false, true, true, false, false], v[0], v[1])
        }),
        case("clamp", &[&[3, 4]], false, |t, v| t.clamp(v[0], -0.5, 0.5)),
        case("slice", &[&[2, 5, 3]], false, |t, v| t.slice(v[0], 1, 1, 3)),
        case("concat", &[&[2, 1, 3], &[2, 2, 3]], false, |t, v| t.concat(&[v[0], v[1]], 1)),
        case("reshape", &[&[2, 6]], false, |t, v| t.reshape(v[0], &[3, 4])),
    ]
}

/// Draws a point for `case` from `seed`.
pub fn draw_point(case: &OpCase, seed: u64) -> Vec<Tensor> {
    let mut r = rng::stream(&[0xD0E5, seed]);
    case.shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data = (0..n)
                .map(|_| if case.positive { r.gen_range(0.5..2.0) } else { r.gen_range(-1.0..1.0) })
                .collect();
            Tensor::new(s.clone(), data).unwrap()
        })
        .collect()
}

/// Non-degenerate: every non-smooth op is at least `10h` from its kink.
pub fn is_non_degenerate(graph: &Graph, point: &[Tensor], h: f64) -> bool {
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.input(p.clone()).unwrap()).collect();
    if graph(&mut tape, &vars).is_err() {
        return false;
    }
    tape.kink_margin() > 10.0 * h
}

/// Worst check_gradient error over `points` non-degenerate draws.
pub fn worst_error(case: &OpCase, points: usize, h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut seed = 0;
    while accepted < points {
        seed += 1;
        assert!(seed < 10_000, "{}: cannot find non-degenerate points", case.name);
        let p = draw_point(case, seed);
        if !is_non_degenerate(&case.graph, &p, h) {
            continue;
        }
        accepted += 1;
        let err = check_gradient(&case.graph, &p, h).unwrap();
        worst = worst.max(err);
    }
    worst
}
