mod common;

use common::{rng, tiny_config, uniform};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsdistill::backbone::{encoder_forward, init_adapters, init_pretrained, BackboneConfig};
use tsdistill::gating::{dag_forward, gate_fuse, init_dag, self_branch};
use tsdistill::harness::{load_series, prepare};
use tsdistill::model::DistillModel;
use tsdistill::optim::Adam;
use tsdistill::params::Role;
use tsdistill::tensor::{Graph, Tensor};

fn tiny_model() -> (DistillModel, tsdistill::data::Batch) {
    let cfg = tiny_config();
    let table = load_series(&cfg).unwrap();
    let data = prepare(&cfg, &table, None).unwrap();
    let model = DistillModel::new(cfg.model_config(data.variates()), cfg.seed).unwrap();
    let batch = data.train.batch(&[0, 3, 5, 7]);
    (model, batch)
}

#[test]
fn zero_initialized_adapters_leave_the_encoder_unchanged() {
    let cfg = BackboneConfig {
        width: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        lookback: 4,
    };
    let enc = init_pretrained(1, &cfg);
    let ad = init_adapters(&mut ChaCha8Rng::seed_from_u64(2), &cfg, 3, 1.0).unwrap();
    let x = uniform(&mut rng(3), 6, 8, -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let e = enc.map(|_, t| g.constant(t.clone()));
    let a = tsdistill::backbone::Adapters {
        blocks: ad.blocks.iter().map(|b| b.map(|_, t| g.constant(t.clone()))).collect(),
        scale: ad.scale,
    };
    let plain = encoder_forward(&mut g, xv, &e, &cfg, 3, None).unwrap();
    let adapted = encoder_forward(&mut g, xv, &e, &cfg, 3, Some(&a)).unwrap();
    assert_eq!(g.value(plain.tokens), g.value(adapted.tokens));
    assert_eq!(plain.trace.len(), 2);
}

#[test]
fn disabled_gating_is_exactly_the_self_branch() {
    let mut g = Graph::new();
    let p = init_dag(&mut ChaCha8Rng::seed_from_u64(4), 8, 3).map(|_, t| g.param(t.clone()));
    let x = g.constant(uniform(&mut rng(5), 6, 8, -1.0, 1.0));
    let anchors = g.constant(uniform(&mut rng(6), 4, 8, -1.0, 1.0));
    let off = dag_forward(&mut g, x, anchors, &p, 2, 3, false).unwrap();
    let reference = self_branch(&mut g, x, &p, 2, 3).unwrap();
    assert_eq!(g.value(off), g.value(reference));
    let on = dag_forward(&mut g, x, anchors, &p, 2, 3, true).unwrap();
    assert!(g.value(on).max_abs_diff(g.value(reference)) > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gated_mix_lies_between_branches(seed: u64, scale in 0.0f64..10.0) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let a = g.constant(uniform(&mut r, 3, 4, -2.0, 2.0));
        let b = g.constant(uniform(&mut r, 3, 4, -2.0, 2.0));
        let w = g.constant(uniform(&mut r, 8, 4, -scale, scale));
        let bias = g.constant(uniform(&mut r, 1, 4, -scale, scale));
        let (mix, gate) = gate_fuse(&mut g, a, b, w, bias).unwrap();
        let (ta, tb, tm) = (g.value(a), g.value(b), g.value(mix));
        for i in 0..tm.len() {
            let (lo, hi) = (ta.data()[i].min(tb.data()[i]), ta.data()[i].max(tb.data()[i]));
            prop_assert!(tm.data()[i] >= lo - 1e-12 && tm.data()[i] <= hi + 1e-12);
            let gv = g.value(gate).data()[i];
            prop_assert!((0.0..=1.0).contains(&gv));
        }
    }
}

#[test]
fn parameter_partition() {
    let (model, _) = tiny_model();
    for (_, p) in model.store.iter() {
        let student_side = p.name.starts_with("embed.")
            || p.name.starts_with("lora.")
            || p.name.starts_with("dag.")
            || p.name.starts_with("student_head.");
        assert_eq!(p.trainable, student_side, "{}", p.name);
        if p.name.starts_with("backbone.") {
            assert_eq!(p.role, Role::Shared);
        }
        if p.name.starts_with("teacher_head.") || p.name == "anchors" || p.name.starts_with("dag.") {
            assert_eq!(p.role, Role::Teacher, "{}", p.name);
        }
    }
    // Teacher head starts as a copy of the student head.
    let s = model.store.find("student_head.w").unwrap();
    let t = model.store.find("teacher_head.w").unwrap();
    assert_eq!(model.store.value(s), model.store.value(t));
}

#[test]
fn every_trainable_parameter_gets_a_finite_gradient() {
    let (model, batch) = tiny_model();
    for a in model.gradient_audit(&batch).unwrap() {
        if a.trainable {
            assert_eq!(a.finite, Some(true), "{}", a.name);
        } else {
            assert_eq!(a.finite, None, "{}", a.name);
        }
    }
}

#[test]
fn training_never_moves_frozen_parameters() {
    let (mut model, batch) = tiny_model();
    let before = model.store.frozen_checksum();
    let trainable_before = model.store.checksum(&model.store.trainable());
    let mut opt = Adam::new(&model.store, 1e-2);
    for _ in 0..5 {
        model.train_step(&batch, &mut opt).unwrap();
    }
    assert_eq!(model.store.frozen_checksum(), before);
    assert_ne!(model.store.checksum(&model.store.trainable()), trainable_before);
}

#[test]
fn inference_uses_only_the_student_path() {
    let (model, batch) = tiny_model();
    let (train, infer) = model.graph_sizes(&batch).unwrap();
    assert!(infer < train);
    let base = model.forward_infer(&batch).unwrap().predictions;
    let mut other = model.clone();
    let mut r = rng(77);
    for id in other.teacher_only() {
        let shape = other.store.value(id).shape().to_vec();
        let t = uniform(&mut r, shape[0], shape.get(1).copied().unwrap_or(1), -3.0, 3.0);
        *other.store.value_mut(id) = Tensor::new(shape, t.into_data()).unwrap();
    }
    assert_eq!(other.forward_infer(&batch).unwrap().predictions, base);
    assert_ne!(other.forward_train(&batch).unwrap().y_text, model.forward_train(&batch).unwrap().y_text);
}

#[test]
fn loss_breakdown_is_consistent() {
    let (model, batch) = tiny_model();
    let out = model.forward_train(&batch).unwrap();
    let b = &out.breakdown;
    assert_eq!(b.feature_per_layer.len(), 2);
    assert_eq!(b.total, b.task + b.alpha * b.feature + b.beta * b.ot);
    let n = b.feature_per_layer.len() as i32;
    let weighted: f64 = b
        .feature_per_layer
        .iter()
        .enumerate()
        .map(|(m, l)| b.gamma.powi(n - 1 - m as i32) * l)
        .sum();
    assert!((weighted - b.feature).abs() <= 1e-12 * weighted.abs());
    assert!(b.ot >= 0.0);
}

#[test]
fn mismatched_batch_is_rejected() {
    let (model, mut batch) = tiny_model();
    batch.variates += 1;
    assert!(model.forward_infer(&batch).is_err());
}
