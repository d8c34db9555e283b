mod common;

use common::{check_layer_shapes, randn, LayerUnderTest, FD_TOL};
use gatecl::model::{BackboneConfig, GatedModel, ModelConfig, Pass};
use gatecl::numerics::ops::conv1d_batch;
use gatecl::numerics::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_layer(layer: LayerUnderTest, seed: u64) {
    let (err, shape) = check_layer_shapes(layer, 20, seed);
    assert!(err <= FD_TOL, "{layer:?}: relative error {err:.3e} at {shape}");
}

#[test]
fn conv1d_gradients() {
    assert_layer(LayerUnderTest::Conv1d, 1);
}

#[test]
fn batchnorm_gradients_both_modes() {
    assert_layer(LayerUnderTest::BatchNormTrain, 2);
    assert_layer(LayerUnderTest::BatchNormEval, 3);
}

#[test]
fn pointwise_gradients() {
    assert_layer(LayerUnderTest::Relu, 4);
    assert_layer(LayerUnderTest::Sigmoid, 5);
}

#[test]
fn linear_and_pooling_gradients() {
    assert_layer(LayerUnderTest::Linear, 6);
    assert_layer(LayerUnderTest::Pooling, 7);
}

#[test]
fn gate_and_residual_gradients() {
    assert_layer(LayerUnderTest::Gate, 8);
    assert_layer(LayerUnderTest::ResidualAdd, 9);
}

#[test]
fn finite_difference_oracle_detects_a_wrong_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = vec![randn(&[2, 3, 4], &mut rng)];
    // forward agrees up to a constant factor, gradients do not
    let err = common::max_grad_error(
        &x,
        &|t, v| t.scale(v[0], 1.001),
        &|x| x[0].clone(),
        &mut rng,
    );
    assert!(err > FD_TOL, "oracle missed a 0.1% gradient error ({err:.3e})");
}

#[test]
fn backward_of_a_sum_is_all_ones() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 7.0]).unwrap(), true);
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let s = tape.sum(w);
    tape.backward(s, &mut store).unwrap();
    assert!(store.get(id).grad.data().iter().all(|&g| g == 1.0));
}

fn tiny_model(gates: bool) -> GatedModel<f64> {
    let mut cfg = ModelConfig::new(BackboneConfig::reference(3).scaled(32), 4);
    if !gates {
        cfg = cfg.without_gates();
    }
    GatedModel::new(cfg, 11).unwrap()
}

#[test]
fn frozen_backbone_gradients_stay_zero() {
    let mut model = tiny_model(true);
    model.freeze_backbone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = randn(&[4, 3, 16], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let f = model.forward(&mut tape, xv, Pass::train(None)).unwrap();
    let loss = tape.cross_entropy(f.logits, &[0, 1, 2, 3]).unwrap();
    model.params_mut().zero_grad();
    tape.backward(loss, model.params_mut()).unwrap();
    let mut trainable_nonzero = false;
    for (_, p) in model.params().iter() {
        if p.trainable {
            trainable_nonzero |= p.grad.data().iter().any(|&g| g != 0.0);
        } else {
            assert!(p.grad.data().iter().all(|&g| g == 0.0), "{} received a gradient", p.name);
        }
    }
    assert!(trainable_nonzero);
}

#[test]
fn zero_learning_rate_leaves_the_model_unchanged() {
    let mut model = tiny_model(true);
    let before: Vec<Tensor<f64>> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
    let mut adam = Adam::new(AdamConfig {
        lr: 0.0,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let x = randn(&[4, 3, 16], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f = model.forward(&mut tape, xv, Pass::eval(None)).unwrap();
        let loss = tape.cross_entropy(f.logits, &[0, 1, 2, 3]).unwrap();
        model.params_mut().zero_grad();
        tape.backward(loss, model.params_mut()).unwrap();
        adam.step(model.params_mut());
    }
    for ((_, p), b) in model.params().iter().zip(&before) {
        assert_eq!(&p.value, b, "{} moved", p.name);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut model = tiny_model(true);
        let x = randn(&[3, 3, 16], &mut ChaCha8Rng::seed_from_u64(5));
        model.predict(&x, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_without_bias(
        seed in any::<u64>(),
        c_in in 1usize..4, c_out in 1usize..4, d in 3usize..12, k in 1usize..4,
        stride in 1usize..3, a in -3.0f64..3.0, b in -3.0f64..3.0,
    ) {
        let k = k.min(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[2, c_in, d], &mut rng);
        let y = randn(&[2, c_in, d], &mut rng);
        let w = randn(&[c_out, c_in, k], &mut rng);
        let pad = k / 2;
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv1d_batch(&mix, &w, None, stride, pad).unwrap();
        let fx = conv1d_batch(&x, &w, None, stride, pad).unwrap();
        let fy = conv1d_batch(&y, &w, None, stride, pad).unwrap();
        let rhs = fx.zip_map(&fy, |p, q| a * p + b * q).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() <= 1e-10);
        }
    }

    #[test]
    fn optimizer_never_touches_frozen_parameters(
        seed in any::<u64>(),
        flags in proptest::collection::vec(any::<bool>(), 1..8),
        steps in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, &t) in flags.iter().enumerate() {
            store.add(format!("p{i}"), randn(&[3, 2], &mut rng), t);
        }
        let frozen = store.checksum_where(|p| !p.trainable);
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.01, ..AdamConfig::default() });
        for _ in 0..steps {
            for p in store.iter_mut() {
                p.grad = randn(&[3, 2], &mut rng);
            }
            adam.step(&mut store);
        }
        prop_assert_eq!(store.checksum_where(|p| !p.trainable), frozen);
    }

    #[test]
    fn training_step_is_deterministic(seed in any::<u64>()) {
        let step = || {
            let mut model = tiny_model(true);
            let x = randn(&[4, 3, 16], &mut ChaCha8Rng::seed_from_u64(seed));
            let mut adam = Adam::new(AdamConfig::default());
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let f = model.forward(&mut tape, xv, Pass::train(None)).unwrap();
            let loss = tape.cross_entropy(f.logits, &[0, 1, 2, 3]).unwrap();
            tape.backward(loss, model.params_mut()).unwrap();
            adam.step(model.params_mut());
            model.params().checksum_where(|_| true)
        };
        prop_assert_eq!(step(), step());
    }
}
