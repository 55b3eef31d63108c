//! Whole-model gradient checks shared by the model tests and the acceptance suite.

use rand::Rng;
use tabench::engine::{check_gradient, EngineError, Tape, Tensor, Var};
use tabench::models::{build_model, ArchKind, Model, ModelSpec};
use tabench::rng;

use super::ops::project;

/// Smallest valid instance of each architecture.
pub fn tiny_specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::new(ArchKind::ToyCnn).with_input(8, 8).with_width(2).with_depth(2).with_classes(4),
        ModelSpec::new(ArchKind::ToyResnet).with_input(8, 8).with_width(2).with_depth(2).with_classes(4),
        ModelSpec::new(ArchKind::ToyVit).with_input(8, 8).with_width(2).with_depth(2).with_classes(4),
        ModelSpec::new(ArchKind::ToyMixer).with_input(8, 8).with_width(2).with_depth(2).with_classes(4),
    ]
}

/// `sum(W ⊙ logits)` as a function of (input, weights...).
pub fn model_graph(model: &Model) -> impl Fn(&mut Tape, &[Var]) -> Result<Var, EngineError> + '_ {
    move |t, v| {
        let f = model.forward_bound(t, v[0], v[1..].to_vec(), false).map_err(|e| match e {
            tabench::models::ModelError::Engine(e) => e,
            other => panic!("{other}"),
        })?;
        project(t, f.logits, 0x0DE1)
    }
}

/// Input image batch of 2 followed by freshly initialised weights for `seed`.
pub fn model_point(spec: &ModelSpec, seed: u64) -> (Model, Vec<Tensor>) {
    let model = build_model(spec, seed).unwrap();
    let mut r = rng::stream(&[0x1A7E, seed]);
    let mut point = vec![Tensor::new(model.input_shape(2), (0..2 * 3 * 64).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()];
    // Zero biases and unit norms would sit on symmetric points; jitter every weight.
    for p in model.params() {
        let mut q = p.clone();
        q.data_mut().iter_mut().for_each(|w| *w += r.gen_range(-0.2..0.2));
        point.push(q);
    }
    (model, point)
}

/// Worst relative error over `points` non-degenerate draws.
pub fn worst_model_error(spec: &ModelSpec, points: usize, h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let (mut accepted, mut seed) = (0, 0);
    while accepted < points {
        seed += 1;
        assert!(seed < 1000, "{}: cannot find non-degenerate points", spec.arch.name());
        let (model, point) = model_point(spec, seed);
        let graph = model_graph(&model);
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|p| tape.input(p.clone()).unwrap()).collect();
        graph(&mut tape, &vars).unwrap();
        if tape.kink_margin() <= 10.0 * h {
            continue;
        }
        accepted += 1;
        worst = worst.max(check_gradient(&graph, &point, h).unwrap());
    }
    worst
}
