mod common;

use common::randn;
use gatecl::model::{
    gate_forward, BackboneConfig, GateConfig, GateInit, GateMode, GatedModel, Group, ModelConfig, INITIAL_GATE,
};
use gatecl::numerics::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reference architecture written out row by row:
/// (name, input channels, output channels, kernel, stride).
fn reference_rows(c0: usize) -> Vec<(String, usize, usize, usize, usize)> {
    let mut rows = vec![("backbone.embed".to_string(), c0, 256, 1, 1)];
    let stacks = [
        (256, 256, [1, 3, 3, 1], 1),
        (256, 384, [1, 5, 3, 1], 1),
        (384, 512, [1, 3, 3, 1], 2),
        (512, 512, [1, 3, 3, 1], 2),
    ];
    for (si, (c_in, c_out, kernels, stride)) in stacks.into_iter().enumerate() {
        let mut c = c_in;
        for (li, k) in kernels.into_iter().enumerate() {
            // stride sits on the first wide kernel
            let s = if li == 1 { stride } else { 1 };
            rows.push((format!("backbone.stack{si}.conv{li}"), c, c_out, k, s));
            c = c_out;
        }
        if c_in != c_out || stride != 1 {
            rows.push((format!("backbone.stack{si}.proj"), c_in, c_out, 1, stride));
        }
    }
    rows
}

/// Parameter total by summing the shapes of every layer.
fn reference_total(c0: usize, classes: usize, gates: bool, bias: bool) -> usize {
    let mut total = 0;
    for (_, c_in, c_out, k, _) in reference_rows(c0) {
        total += c_out * c_in * k + 2 * c_out;
    }
    if gates {
        for c in [256, 384, 512, 512] {
            let hidden = (c / 8).max(16);
            total += 2 * c * hidden;
        }
    }
    total + 512 * classes + if bias { classes } else { 0 }
}

fn param_shape(model: &GatedModel<f64>, name: &str) -> Vec<usize> {
    model
        .params()
        .iter()
        .find(|(_, p)| p.name == name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .1
        .value
        .shape()
        .to_vec()
}

#[test]
fn reference_layers_match_the_architecture_table() {
    for c0 in [3, 9, 15] {
        let mut model = GatedModel::<f64>::new(ModelConfig::new(BackboneConfig::reference(c0), 12), 0).unwrap();
        for (name, c_in, c_out, k, _) in reference_rows(c0) {
            assert_eq!(param_shape(&model, &format!("{name}.weight")), vec![c_out, c_in, k], "{name}");
            assert_eq!(param_shape(&model, &format!("{name}.bn.gamma")), vec![c_out]);
        }
        assert_eq!(param_shape(&model, "classifier.weight"), vec![12, 512]);
        let x = randn(&[c0, 200], &mut ChaCha8Rng::seed_from_u64(c0 as u64));
        let (logits, trace) = model.model_forward(&x, None, true).unwrap();
        let trace = trace.unwrap();
        let shapes: Vec<Vec<usize>> = trace.layers.iter().map(|l| l.u.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![256, 200], vec![384, 200], vec![512, 100], vec![512, 50]]);
        assert_eq!(trace.pooled.shape(), &[512]);
        assert_eq!(logits.shape(), &[12]);
    }
}

#[test]
fn parameter_count_matches_the_layer_sum() {
    for (c0, classes) in [(3, 6), (9, 12), (15, 18)] {
        for gates in [false, true] {
            let mut cfg = ModelConfig::new(BackboneConfig::reference(c0), classes);
            if !gates {
                cfg = cfg.without_gates();
            }
            let model = GatedModel::<f64>::new(cfg, 0).unwrap();
            let count = model.count_parameters();
            assert_eq!(count.total, reference_total(c0, classes, gates, true));
            assert_eq!(count.trainable, count.total);
            assert_eq!(count.fraction, 1.0);
        }
    }
}

#[test]
fn gate_on_512_channels_has_65536_weights() {
    assert_eq!(GateConfig::default().hidden(512), 64);
    assert_eq!(GateConfig::default().param_count(512), 65_536);
    let model = GatedModel::<f64>::new(ModelConfig::new(BackboneConfig::reference(9), 12), 0).unwrap();
    let g = model.gate_params(0)[3];
    let n = model.params().get(g.w1).numel() + model.params().get(g.w2).numel();
    assert_eq!(n, 65_536);
    // narrow stacks hit the hidden-width floor
    assert_eq!(GateConfig::default().hidden(64), 16);
}

#[test]
fn classifier_only_training_counts_its_weights() {
    for bias in [true, false] {
        let cfg = ModelConfig {
            classifier_bias: bias,
            ..ModelConfig::new(BackboneConfig::reference(9), 12).without_gates()
        };
        let mut model = GatedModel::<f64>::new(cfg, 0).unwrap();
        model.freeze_backbone();
        let count = model.count_parameters();
        assert_eq!(count.trainable, 512 * 12 + if bias { 12 } else { 0 });
        assert_eq!(count.fraction, count.trainable as f64 / count.total as f64);
    }
}

#[test]
fn hand_multiplied_gate_application() {
    let u = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 3.0, 2.0, 2.0]).unwrap();
    let g = Tensor::from_f64(&[2], &[0.5, 0.25]).unwrap();
    let h = gatecl::model::apply_gate(&u, &g).unwrap();
    assert_eq!(h.data(), &[0.5, 1.5, 0.5, 0.5]);
}

fn small_config(gates: bool) -> ModelConfig {
    let cfg = ModelConfig::new(BackboneConfig::reference(3).scaled(32), 5);
    if gates {
        cfg
    } else {
        cfg.without_gates()
    }
}

#[test]
fn ungated_model_passes_features_through() {
    let mut model = GatedModel::<f64>::new(small_config(false), 3).unwrap();
    let x = randn(&[3, 24], &mut ChaCha8Rng::seed_from_u64(1));
    let (_, trace) = model.model_forward(&x, None, true).unwrap();
    for l in trace.unwrap().layers {
        assert!(l.g.is_none());
        assert_eq!(l.h, l.u);
    }
}

#[test]
fn capturing_a_trace_does_not_change_logits() {
    let mut model = GatedModel::<f64>::new(small_config(true), 3).unwrap();
    let x = randn(&[3, 24], &mut ChaCha8Rng::seed_from_u64(2));
    let (a, _) = model.model_forward(&x, None, true).unwrap();
    let (b, t) = model.model_forward(&x, None, false).unwrap();
    assert!(t.is_none());
    assert_eq!(a, b);
}

#[test]
fn inserting_gates_preserves_the_pretrained_function() {
    let src = GatedModel::<f64>::new(small_config(false), 4).unwrap();
    let mut gated = GatedModel::<f64>::new(small_config(true), 5).unwrap();
    gated.load_backbone_from(&src).unwrap();
    // exactly neutral gates
    for g in gated.gate_params(0).to_vec() {
        let p = gated.params_mut().get_mut(g.w2);
        p.value = p.value.map(|_| 0.0);
    }
    let mut src = src;
    let x = randn(&[3, 24], &mut ChaCha8Rng::seed_from_u64(3));
    let (_, ts) = src.model_forward(&x, None, true).unwrap();
    let (_, tg) = gated.model_forward(&x, None, true).unwrap();
    let (ts, tg) = (ts.unwrap(), tg.unwrap());
    for (a, b) in ts.layers.iter().zip(&tg.layers) {
        for (&ua, &hb) in a.u.data().iter().zip(b.h.data()) {
            assert!((INITIAL_GATE * ua - hb).abs() <= 1e-12 * (1.0 + ua.abs()));
        }
    }
}

#[test]
fn task_aware_gate_sets_grow_linearly() {
    let cfg = ModelConfig {
        mode: GateMode::TaskAware { init: GateInit::Warm },
        ..small_config(true)
    };
    let mut model = GatedModel::<f64>::new(cfg, 0).unwrap();
    let per_set = model.count_parameters().total;
    let base = GatedModel::<f64>::new(small_config(false), 0).unwrap().count_parameters().total;
    let gate_size = per_set - base;
    let x = randn(&[3, 24], &mut ChaCha8Rng::seed_from_u64(4));
    model.clone_gates_for_task(100).unwrap();
    let (before, _) = model.model_forward(&x, Some(100), false).unwrap();
    for t in 101..130 {
        model.clone_gates_for_task(t).unwrap();
    }
    assert_eq!(model.gate_set_count(), 30);
    assert_eq!(model.count_parameters().total, base + 30 * gate_size);
    // warm start: a fresh set reproduces its predecessor until trained
    let (after, _) = model.model_forward(&x, Some(129), false).unwrap();
    assert_eq!(before, after);
    assert!(model.model_forward(&x, Some(7), false).is_err());
    // only the newest set is trainable
    let trainable_gates: usize = model
        .ids_in(Group::Gates)
        .into_iter()
        .filter(|&id| model.params().get(id).trainable)
        .map(|id| model.params().get(id).numel())
        .sum();
    assert_eq!(trainable_gates, gate_size);
}

#[test]
fn task_free_models_refuse_per_task_gates() {
    let mut model = GatedModel::<f64>::new(small_config(true), 0).unwrap();
    assert!(model.clone_gates_for_task(1).is_err());
    assert_eq!(model.gate_set_count(), 1);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig {
        mode: GateMode::TaskAware { init: GateInit::Cold },
        ..small_config(true)
    };
    let mut model = GatedModel::<f64>::new(cfg, 9).unwrap();
    model.clone_gates_for_task(3).unwrap();
    model.clone_gates_for_task(8).unwrap();
    model.freeze_backbone();
    let meta = serde_json::json!({"epoch": 4});
    let bytes = model.to_bytes(meta.clone()).unwrap();
    let (mut back, m) = GatedModel::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(m, meta);
    assert_eq!(back.config(), model.config());
    assert_eq!(back.subjects(), model.subjects());
    assert_eq!(back.backbone_checksum(), model.backbone_checksum());
    for ((_, a), (_, b)) in model.params().iter().zip(back.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        assert_eq!(a.value, b.value);
    }
    assert_eq!(back.to_bytes(meta).unwrap(), bytes);
    let x = randn(&[3, 24], &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(back.model_forward(&x, Some(8), false).unwrap().0, model.model_forward(&x, Some(8), false).unwrap().0);

    let f32_model = GatedModel::<f32>::new(small_config(true), 1).unwrap();
    let bytes = f32_model.to_bytes(serde_json::Value::Null).unwrap();
    let (back, _) = GatedModel::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(serde_json::Value::Null).unwrap(), bytes);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let model = GatedModel::<f64>::new(small_config(true), 1).unwrap();
    let bytes = model.to_bytes(serde_json::Value::Null).unwrap();
    assert!(GatedModel::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(GatedModel::<f64>::from_bytes(&bytes[..10]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gates_scale_channels_without_rotating_them(seed in any::<u64>(), d in 8usize..40) {
        let mut model = GatedModel::<f64>::new(small_config(true), seed).unwrap();
        let x = randn(&[3, d], &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let (_, trace) = model.model_forward(&x, None, true).unwrap();
        for l in trace.unwrap().layers {
            let g = l.g.unwrap();
            let len = l.u.dim(1);
            for (c, &gc) in g.data().iter().enumerate() {
                prop_assert!(gc > 0.0 && gc < 1.0);
                let u = &l.u.data()[c * len..(c + 1) * len];
                let h = &l.h.data()[c * len..(c + 1) * len];
                let nu: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nu > 0.0 {
                    let nh: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = u.iter().zip(h).map(|(a, b)| a * b).sum();
                    prop_assert!((dot / (nu * nh) - 1.0).abs() <= 1e-12);
                }
                for (a, b) in u.iter().zip(h) {
                    prop_assert_eq!(gc * a, *b);
                }
            }
        }
    }

    #[test]
    fn rescaling_features_into_the_classifier_keeps_decisions(
        seed in any::<u64>(),
        log_alpha in -4.0f64..4.0,
        pow2 in -6i32..6,
    ) {
        let mut model = GatedModel::<f64>::new(small_config(true).without_gates(), seed).unwrap();
        let x = randn(&[3, 20], &mut ChaCha8Rng::seed_from_u64(seed ^ 2));
        let (logits, trace) = model.model_forward(&x, None, true).unwrap();
        let h = trace.unwrap().pooled;
        let w = model.params().value(model.classifier_weight()).clone();
        let b = model.params().value(model.classifier_bias().unwrap()).clone();
        let k = w.dim(0);
        let classify = |alpha: f64| -> Vec<f64> {
            (0..k)
                .map(|i| {
                    let row = &w.data()[i * h.len()..(i + 1) * h.len()];
                    row.iter().zip(h.data()).map(|(wv, hv)| (alpha * wv) * (hv / alpha)).sum::<f64>() + b.data()[i]
                })
                .collect()
        };
        let plain = classify(1.0);
        for (a, c) in plain.iter().zip(logits.data()) {
            prop_assert!((a - c).abs() <= 1e-12 * (1.0 + c.abs()));
        }
        // powers of two rescale without rounding
        prop_assert_eq!(classify(2f64.powi(pow2)), plain.clone());
        let scaled = classify(log_alpha.exp());
        let argmax = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec()).unwrap().argmax();
        prop_assert_eq!(argmax(&scaled), argmax(&plain));
        for (a, c) in scaled.iter().zip(&plain) {
            prop_assert!((a - c).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn standalone_gate_matches_its_definition(seed in any::<u64>(), c in 1usize..12, d in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = GateConfig::default().hidden(c);
        let u = randn(&[c, d], &mut rng);
        let w1 = randn(&[hidden, c], &mut rng);
        let w2 = randn(&[c, hidden], &mut rng);
        let (g, h) = gate_forward(&u, &w1, &w2).unwrap();
        for ci in 0..c {
            let z: Vec<f64> = (0..c).map(|j| u.data()[j * d..(j + 1) * d].iter().sum::<f64>() / d as f64).collect();
            let a: Vec<f64> = (0..hidden).map(|r| (0..c).map(|j| w1.data()[r * c + j] * z[j]).sum::<f64>().max(0.0)).collect();
            let s: f64 = (0..hidden).map(|r| w2.data()[ci * hidden + r] * a[r]).sum();
            let want = 1.0 / (1.0 + (-s).exp());
            prop_assert!((g.data()[ci] - want).abs() <= 1e-12);
            for j in 0..d {
                prop_assert_eq!(h.data()[ci * d + j], g.data()[ci] * u.data()[ci * d + j]);
            }
        }
    }
}
