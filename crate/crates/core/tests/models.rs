mod common;

use rand::Rng;
use tabench::engine::{HookDescriptor, HookKind, HookRegistry, Tape, Tensor};
use tabench::models::{
    build_model, load_checkpoint, read_header, save_checkpoint, ArchKind, ForwardOptions, Model, ModelSpec, TrainMeta,
};
use tabench::rng;

fn batch(n: usize, size: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(&[0xBA7C, seed]);
    Tensor::new(vec![n, 3, size, size], (0..n * 3 * size * size).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

fn logits_with(model: &Model, reg: HookRegistry, x: &Tensor) -> Tensor {
    let mut tape = Tape::with_hooks(reg);
    let xv = tape.input(x.clone()).unwrap();
    let f = model.forward(&mut tape, xv, ForwardOptions::default()).unwrap();
    tape.value(f.logits).clone()
}

#[test]
fn every_architecture_passes_gradient_check() {
    for spec in common::models::tiny_specs() {
        let err = common::models::worst_model_error(&spec, 10, 1e-5);
        assert!(err <= 1e-6, "{}: relative error {err}", spec.arch.name());
    }
}

#[test]
fn predict_is_chunk_and_thread_invariant() {
    let model = build_model(&ModelSpec::new(ArchKind::ToyVit).with_input(16, 16).with_width(4).with_depth(2), 3).unwrap();
    let x = batch(70, 16, 1);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| model.predict(&x).unwrap());
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| model.predict(&x).unwrap());
    assert_eq!(one, four);
    // A single row predicted alone matches its row in the batch.
    let row = model.predict(&x.row(41).reshaped(&[1, 3, 16, 16]).unwrap()).unwrap();
    assert_eq!(row.data(), one.row(41).data());
}

#[test]
fn every_label_accepts_every_hook_kind_it_supports() {
    for spec in common::models::tiny_specs() {
        let labels = spec.label_set();
        for l in spec.layer_labels() {
            let mut reg = HookRegistry::new();
            reg.install(&HookDescriptor::new(HookKind::CaptureForward, [l.clone()]), &labels).unwrap();
            let model = build_model(&spec, 0).unwrap();
            let mut tape = Tape::with_hooks(reg);
            let xv = tape.input(batch(1, 8, 0)).unwrap();
            model.forward(&mut tape, xv, ForwardOptions::default()).unwrap();
            assert!(tape.captured(&l).is_some(), "{}: {l} not captured", spec.arch.name());
        }
        for kind in [HookKind::IdentityReluGrad, HookKind::SoftplusReluGrad] {
            HookRegistry::new().install(&HookDescriptor::new(kind, spec.relu_labels()), &labels).unwrap();
        }
        HookRegistry::new().install(&HookDescriptor::scale_branch(0.5, spec.skip_labels()), &labels).unwrap();
        HookRegistry::new()
            .install(&HookDescriptor::new(HookKind::SkipAttentionGrad, spec.attention_labels()), &labels)
            .unwrap();
    }
}

#[test]
fn backward_hooks_leave_forward_bit_identical() {
    let x = batch(3, 8, 9);
    for spec in common::models::tiny_specs() {
        let model = build_model(&spec, 5).unwrap();
        let labels = spec.label_set();
        let plain = logits_with(&model, HookRegistry::new(), &x);
        let mut reg = HookRegistry::new();
        reg.install(&HookDescriptor::new(HookKind::IdentityReluGrad, spec.relu_labels()), &labels).unwrap();
        reg.install(&HookDescriptor::scale_branch(0.3, spec.skip_labels()), &labels).unwrap();
        reg.install(&HookDescriptor::new(HookKind::SkipAttentionGrad, spec.attention_labels()), &labels).unwrap();
        assert_eq!(plain, logits_with(&model, reg, &x), "{}", spec.arch.name());
    }
}

#[test]
fn skip_attention_changes_only_the_gradient() {
    let spec = ModelSpec::new(ArchKind::ToyVit).with_input(8, 8).with_width(2).with_depth(2).with_classes(4);
    let model = build_model(&spec, 2).unwrap();
    let x = batch(2, 8, 4);
    let run = |hooked: bool| {
        let mut reg = HookRegistry::new();
        if hooked {
            reg.install(&HookDescriptor::new(HookKind::SkipAttentionGrad, spec.attention_labels()), &spec.label_set())
                .unwrap();
        }
        let mut tape = Tape::with_hooks(reg);
        let xv = tape.input(x.clone()).unwrap();
        let f = model.forward(&mut tape, xv, ForwardOptions::default()).unwrap();
        let out = tape.value(f.logits).clone();
        let s = tape.sum(f.logits).unwrap();
        (out, tape.backward_scalar(s).unwrap().take(xv).unwrap())
    };
    let (a, ga) = run(false);
    let (b, gb) = run(true);
    assert_eq!(a, b);
    assert_ne!(ga, gb);
}

#[test]
fn unknown_label_is_rejected() {
    let spec = &common::models::tiny_specs()[0];
    let err = HookRegistry::new()
        .install(&HookDescriptor::new(HookKind::CaptureForward, ["block9.out"]), &spec.label_set())
        .unwrap_err();
    assert!(err.to_string().contains("block9.out"));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, spec) in common::models::tiny_specs().into_iter().enumerate() {
        let meta = TrainMeta { seed: 11, epochs: 3, clean_test_accuracy: Some(0.5), robust_accuracy: None, kind: "standard".into() };
        let model = build_model(&spec, i as u64).unwrap().with_meta(meta);
        let path = dir.path().join(format!("{i}.tabx"));
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        let bits = |m: &Model| m.flat_weights().iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&model));
        assert_eq!(read_header(&path).unwrap().spec, spec);
        let x = batch(2, 8, 1);
        assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
    }
}

#[test]
fn wrong_input_and_weights_are_rejected() {
    let spec = &common::models::tiny_specs()[0];
    let model = build_model(spec, 0).unwrap();
    assert!(model.predict(&batch(1, 16, 0)).is_err());
    let mut tape = Tape::new();
    let xv = tape.input(batch(1, 8, 0)).unwrap();
    assert!(model.forward_bound(&mut tape, xv, vec![], false).is_err());
}

#[test]
fn initialisation_depends_only_on_seed() {
    let spec = ModelSpec::new(ArchKind::ToyResnet).with_input(16, 16).with_width(4);
    assert_eq!(build_model(&spec, 4).unwrap(), build_model(&spec, 4).unwrap());
    assert_ne!(build_model(&spec, 4).unwrap().flat_weights(), build_model(&spec, 5).unwrap().flat_weights());
    assert_eq!(build_model(&spec, 4).unwrap().num_params(), spec.param_count());
}
