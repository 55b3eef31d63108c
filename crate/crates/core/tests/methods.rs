mod common;

use common::methods::*;
use tabench::attack::{run_attack, run_attack_with, AttackError, AttackOptions, AttackSpec};
use tabench::engine::{Tape, Tensor};
use tabench::methods::{
    feature_loss, install_backward_method, precompute_aggregates, ridge_weights, Aggregates, MethodError, MethodKind,
    MethodParams, ReferenceTrace,
};
use tabench::models::{build_model, ArchKind, ModelSpec};

#[test]
fn sgm_matches_detached_branch_construction() {
    for gamma in [0.5, 0.2] {
        let err = sgm_error(gamma, 4);
        assert!(err <= 1e-12, "gamma {gamma}: {err:e}");
    }
}

#[test]
fn linbp_matches_straight_through_relus() {
    for layer in [1, 2] {
        let err = linbp_error(layer, 4);
        assert!(err <= 1e-12, "layer {layer}: {err:e}");
    }
}

#[test]
fn backward_methods_do_change_the_gradient() {
    assert!(gradient_shift(&MethodParams::new(MethodKind::Sgm).with_gamma(0.5)) > 1e-6);
    assert!(gradient_shift(&MethodParams::new(MethodKind::LinBp).with_layer(1)) > 1e-6);
    assert!(gradient_shift(&MethodParams::new(MethodKind::ConBp).with_layer(1)) > 1e-6);
}

#[test]
fn sgm_with_unit_gamma_and_pna_forward_are_unchanged() {
    assert_eq!(sgm_error(1.0, 2), 0.0);
    assert!(pna_forward_identical(3));
}

#[test]
fn incompatible_methods_are_rejected() {
    let cnn = build_model(&ModelSpec::new(ArchKind::ToyCnn).with_input(16, 16), 0).unwrap();
    for kind in [MethodKind::Sgm, MethodKind::Pna, MethodKind::Se] {
        assert!(
            matches!(install_backward_method(&cnn, &MethodParams::new(kind)), Err(MethodError::Incompatible { .. })),
            "{kind}"
        );
    }
    let resnet = resnet2();
    assert!(install_backward_method(&resnet, &MethodParams::new(MethodKind::Sgm).with_gamma(0.0)).is_err());
    assert!(install_backward_method(&resnet, &MethodParams::new(MethodKind::LinBp).with_layer(9)).is_err());
}

#[test]
fn feature_losses_match_recomputation() {
    for kind in FEATURE_METHODS {
        let err = feature_loss_error(kind, 100);
        assert!(err <= 1e-10, "{kind}: {err:e}");
    }
}

fn fixture() -> (tabench::models::Model, Tensor, Vec<usize>) {
    (resnet2(), rand_tensor(&[2, 3, 16, 16], &[0xF1], 0.0, 1.0), vec![1, 3])
}

#[test]
fn ila_reference_at_benign_point_gives_zero_direction() {
    let (model, x, y) = fixture();
    let trace = ReferenceTrace { deltas: vec![Tensor::zeros(x.shape())] };
    let agg =
        precompute_aggregates(&MethodParams::new(MethodKind::Ila), &model, &x, &y, &[0, 1], 0, Some(&trace)).unwrap();
    assert!(agg.ila_direction.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn ila_loss_is_linear_in_the_direction() {
    let shape = [2, 3, 4, 4];
    let f = rand_tensor(&shape, &[1], -1.0, 1.0);
    let clean = rand_tensor(&shape, &[2], -1.0, 1.0);
    let dir = rand_tensor(&shape, &[3], -1.0, 1.0);
    let loss = |d: &Tensor| {
        let agg = Aggregates { clean: Some(clean.clone()), ila_direction: Some(d.clone()), ..Aggregates::default() };
        let mut t = Tape::new();
        let fv = t.input(f.clone()).unwrap();
        let dv = t.constant(Tensor::zeros(&[2, 3, 4, 4])).unwrap();
        let out = feature_loss(&MethodParams::new(MethodKind::Ila), &mut t, fv, dv, None, &agg, None).unwrap();
        t.value(out).data().to_vec()
    };
    let base = loss(&dir);
    let tripled = loss(&dir.map(|v| 3.0 * v));
    for (a, b) in base.iter().zip(&tripled) {
        assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn ridge_weights_single_row_closed_form() {
    let h = vec![vec![0.5, -1.0, 2.0]];
    let (r, lambda) = (0.7, 0.1);
    let w = ridge_weights(&h, &[r], lambda).unwrap();
    let norm2: f64 = h[0].iter().map(|v| v * v).sum();
    for (wi, hi) in w.iter().zip(&h[0]) {
        assert!((wi - hi * r / (norm2 + lambda)).abs() <= 1e-14);
    }
    assert!(ridge_weights(&h, &[r], 0.0).is_err());
}

#[test]
fn fia_without_dropout_is_one_normalised_gradient() {
    let (model, x, y) = fixture();
    let run = |n| {
        let mut p = MethodParams::new(MethodKind::Fia).with_n_agg(n);
        p.drop_prob_fia = 0.0;
        precompute_aggregates(&p, &model, &x, &y, &[0, 1], 4, None).unwrap().fia_gradient.unwrap()
    };
    let one = run(1);
    for row in one.data().chunks(one.numel() / 2) {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
    }
    for (a, b) in one.data().iter().zip(run(3).data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn fda_with_empty_mask_and_nrdm_at_origin() {
    let shape = [2, 3, 4, 4];
    let f = rand_tensor(&shape, &[9], 0.0, 1.0);
    let agg = Aggregates { clean: Some(f.clone()), ..Aggregates::default() };
    let mut t = Tape::new();
    let fv = t.input(f.clone()).unwrap();
    let dv = t.constant(Tensor::zeros(&[2, 3, 4, 4])).unwrap();
    let all_above = [-1.0; 3];
    let fda = feature_loss(&MethodParams::new(MethodKind::Fda), &mut t, fv, dv, None, &agg, Some(&all_above)).unwrap();
    assert!(t.value(fda).data().iter().all(|v| v.is_finite()));
    let nrdm = feature_loss(&MethodParams::new(MethodKind::Nrdm), &mut t, fv, dv, None, &agg, None).unwrap();
    assert!(t.value(nrdm).data().iter().all(|&v| v == 0.0));
    let s = t.sum(nrdm).unwrap();
    let g = t.backward_scalar(s).unwrap();
    assert!(g.get_or_zeros(fv, &shape).data().iter().all(|v| v.is_finite()));
}

#[test]
fn output_space_methods_degenerate_to_plain() {
    let (model, x, y) = fixture();
    let subs = std::slice::from_ref(&model);
    let plain = AttackSpec { iterations: 4, ..AttackSpec::linf() };
    let base = run_attack(subs, &x, &y, &plain).unwrap().x_adv;
    for method in [MethodParams::new(MethodKind::Vt).with_n_agg(0), MethodParams::new(MethodKind::Taig).with_n_agg(1)] {
        let kind = method.kind;
        let out = run_attack(subs, &x, &y, &AttackSpec { method: Some(method), ..plain.clone() }).unwrap();
        assert_eq!(out.x_adv, base, "{kind}");
    }
}

#[test]
fn baselines_spend_the_same_backprops() {
    for (method, baseline, n) in
        [(MethodKind::Vt, MethodKind::VtBaseline, 4), (MethodKind::Taig, MethodKind::TaigBaseline, 5)]
    {
        let a = backprops_per_iteration(method, n);
        assert!(a > 1);
        assert_eq!(a, backprops_per_iteration(baseline, n), "{method}");
    }
    assert_eq!(backprops_per_iteration(MethodKind::Vt, 4), 5);
    assert_eq!(backprops_per_iteration(MethodKind::IrBaseline, 3), 3);
}

#[test]
fn fda_needs_statistics() {
    let (model, x, y) = fixture();
    let spec = AttackSpec { iterations: 1, method: Some(MethodParams::new(MethodKind::Fda)), ..AttackSpec::linf() };
    let err = run_attack_with(std::slice::from_ref(&model), &x, &y, &spec, &AttackOptions::default()).unwrap_err();
    assert!(matches!(err, AttackError::Method(MethodError::MissingAggregate(_))), "{err}");
    let stats = rand_tensor(&[4, 3, 16, 16], &[0x57], 0.0, 1.0);
    let opts = AttackOptions { stats: Some(&stats), backprop_counter: None };
    assert!(run_attack_with(std::slice::from_ref(&model), &x, &y, &spec, &opts).is_ok());
}
