//! Random attack configurations for the budget/box property.

use proptest::prelude::*;
use rand::Rng;
use tabench::attack::{AttackSpec, InitKind, Norm, OptimizerKind};
use tabench::augment::{AugmentKind, AugmentParams, AugmentStack};
use tabench::engine::Tensor;
use tabench::models::{build_model, Model};
use tabench::rng;

/// Tiny substitute and a 3-image batch on which the fuzzed attacks run.
pub fn fixture() -> (Model, Tensor, Vec<usize>) {
    let model = build_model(&super::models::tiny_specs()[0], 21).unwrap();
    let mut r = rng::stream(&[0xF022]);
    let x = Tensor::new(vec![3, 3, 8, 8], (0..3 * 192).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap();
    (model, x, vec![0, 1, 3])
}

fn arb_stack() -> impl Strategy<Value = AugmentStack> {
    (
        proptest::collection::vec(any::<bool>(), 6),
        prop_oneof![Just(2usize), Just(4)],
        0.0..=1.0f64,
        1usize..=8,
        0.0..=1.0f64,
        0usize..=3,
        0.0..=0.5f64,
    )
        .prop_map(|(on, dp_patch, dp_drop, di2_min_resize, di2_prob, ti_max_shift, admix_eta)| {
            let mut kinds: Vec<AugmentKind> =
                AugmentKind::CANONICAL.iter().zip(&on).filter(|(_, &b)| b).map(|(&k, _)| k).collect();
            if kinds.contains(&AugmentKind::Admix) {
                kinds.retain(|&k| k != AugmentKind::Si);
            }
            let params = AugmentParams {
                dp_patch,
                dp_drop,
                di2_min_resize,
                di2_prob,
                ti_max_shift,
                admix_eta,
                ..AugmentParams::for_size(8)
            };
            AugmentStack::new(kinds, params).unwrap()
        })
}

pub fn arb_spec() -> impl Strategy<Value = AttackSpec> {
    (
        prop_oneof![Just(Norm::Inf), Just(Norm::Two)],
        1e-4..1.0f64,
        1e-4..1.0f64,
        prop_oneof![Just(InitKind::Zeros), Just(InitKind::UniformRandom)],
        prop_oneof![Just(OptimizerKind::Plain), Just(OptimizerKind::Mi), Just(OptimizerKind::Ni), Just(OptimizerKind::Pi)],
        0.0..=1.5f64,
        arb_stack(),
        1usize..=2,
        any::<u64>(),
    )
        .prop_map(|(norm, e, a, init, optimizer, momentum, augment, n_backprops_per_iter, seed)| {
            // ℓ₂ budgets live on a larger scale.
            let scale = if norm == Norm::Two { 8.0 } else { 1.0 };
            AttackSpec {
                norm,
                epsilon: e * scale,
                step_size: a * scale,
                iterations: 5,
                init,
                optimizer,
                momentum,
                augment,
                method: None,
                n_backprops_per_iter,
                seed,
            }
        })
}

/// Violation message, if `x_adv` breaks the budget or the box.
pub fn budget_violation(x: &Tensor, x_adv: &Tensor, spec: &AttackSpec) -> Option<String> {
    let per = x.numel() / x.shape()[0];
    if let Some(v) = x_adv.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Some(format!("pixel {v} outside [0, 1]"));
    }
    for (i, (a, b)) in x_adv.data().chunks(per).zip(x.data().chunks(per)).enumerate() {
        let d: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
        let (norm, tol) = match spec.norm {
            Norm::Inf => (d.iter().fold(0.0f64, |m, v| m.max(v.abs())), 1e-12),
            Norm::Two => (d.iter().map(|v| v * v).sum::<f64>().sqrt(), 1e-9),
        };
        if norm > spec.epsilon + tol {
            return Some(format!("example {i}: norm {norm} > ε {}", spec.epsilon));
        }
    }
    None
}
