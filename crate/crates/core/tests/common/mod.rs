//! Oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use gatecl::numerics::ops;
use gatecl::numerics::{BnStats, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradient entries.
const REL_FLOOR: f64 = 1e-6;

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Normal draws pushed at least `gap` away from zero, so a kink at 0 is
/// never within one finite-difference step.
pub fn randn_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    randn(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

type TapeFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;
type PlainFn<'a> = dyn Fn(&[Tensor<f64>]) -> Tensor<f64> + 'a;

fn sq_dist(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Max relative error between reverse-mode gradients and central
/// differences of `L = Σ (f(inputs) − target)²`, over every input entry.
///
/// `tape_fn` records `f` on the tape, `plain_fn` evaluates it directly.
pub fn max_grad_error(inputs: &[Tensor<f64>], tape_fn: &TapeFn<'_>, plain_fn: &PlainFn<'_>, rng: &mut ChaCha8Rng) -> f64 {
    let out = plain_fn(inputs);
    let target = randn(out.shape(), rng);

    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t.clone(), true))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let y = tape_fn(&mut tape, &vars);
    let mse = tape.mse(y, &target).unwrap();
    let loss = tape.scale(mse, out.len() as f64);
    tape.backward(loss, &mut store).unwrap();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, &id) in ids.iter().enumerate() {
        let analytic = store.get(id).grad.clone();
        for j in 0..probe[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = sq_dist(&plain_fn(&probe), &target);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = sq_dist(&plain_fn(&probe), &target);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerUnderTest {
    Conv1d,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Sigmoid,
    Linear,
    Pooling,
    Gate,
    ResidualAdd,
}

impl LayerUnderTest {
    pub const ALL: [LayerUnderTest; 9] = [
        LayerUnderTest::Conv1d,
        LayerUnderTest::BatchNormTrain,
        LayerUnderTest::BatchNormEval,
        LayerUnderTest::Relu,
        LayerUnderTest::Sigmoid,
        LayerUnderTest::Linear,
        LayerUnderTest::Pooling,
        LayerUnderTest::Gate,
        LayerUnderTest::ResidualAdd,
    ];
}

fn running_stats(c: usize, rng: &mut ChaCha8Rng) -> BnStats<f64> {
    let mut s = BnStats::new(c);
    s.running_mean = randn(&[c], rng);
    s.running_var = randn(&[c], rng).map(|v| 0.5 + v.abs());
    s
}

/// Gradient check of one layer on one random shape drawn from `rng`.
/// Returns the max relative error and a description of the shape.
pub fn check_layer(layer: LayerUnderTest, rng: &mut ChaCha8Rng) -> (f64, String) {
    let b = rng.random_range(1..=3usize);
    let c = rng.random_range(1..=5usize);
    let d = rng.random_range(2..=9usize);
    match layer {
        LayerUnderTest::Conv1d => {
            let c_out = rng.random_range(1..=4usize);
            let k = rng.random_range(1..=d.min(5));
            let stride = rng.random_range(1..=2usize);
            let padding = rng.random_range(0..=k / 2);
            let with_bias = rng.random_bool(0.7);
            let mut inputs = vec![randn(&[b, c, d], rng), randn(&[c_out, c, k], rng)];
            if with_bias {
                inputs.push(randn(&[c_out], rng));
            }
            let err = max_grad_error(
                &inputs,
                &|t, v| t.conv1d(v[0], v[1], v.get(2).copied(), stride, padding).unwrap(),
                &|x| ops::conv1d_batch(&x[0], &x[1], x.get(2), stride, padding).unwrap(),
                rng,
            );
            (err, format!("x[{b},{c},{d}] w[{c_out},{c},{k}] s{stride} p{padding} bias {with_bias}"))
        }
        LayerUnderTest::BatchNormTrain | LayerUnderTest::BatchNormEval => {
            let train = layer == LayerUnderTest::BatchNormTrain;
            // two values per channel normalize to ±1 whatever they are, so
            // the train-mode gradient is an eps artifact; use at least three
            let b = if train { b.max(2) } else { b };
            let shape: Vec<usize> = if rng.random_bool(0.3) {
                vec![if train { b.max(3) } else { b }, c]
            } else {
                vec![b, c, d]
            };
            let stats = running_stats(c, rng);
            let inputs = vec![randn(&shape, rng), randn(&[c], rng).map(|v| v + 1.0), randn(&[c], rng)];
            let err = max_grad_error(
                &inputs,
                &|t, v| {
                    let mut s = stats.clone();
                    t.batchnorm(v[0], v[1], v[2], &mut s, train).unwrap()
                },
                &|x| {
                    let mut s = stats.clone();
                    ops::batchnorm_forward(&x[0], &x[1], &x[2], &mut s, train).unwrap().0
                },
                rng,
            );
            (err, format!("x{shape:?} train {train}"))
        }
        LayerUnderTest::Relu => {
            let inputs = vec![randn_away_from_zero(&[b, c, d], 1e-3, rng)];
            let err = max_grad_error(&inputs, &|t, v| t.relu(v[0]), &|x| ops::relu(&x[0]), rng);
            (err, format!("x[{b},{c},{d}]"))
        }
        LayerUnderTest::Sigmoid => {
            let inputs = vec![randn(&[b, c, d], rng).map(|v| 3.0 * v)];
            let err = max_grad_error(&inputs, &|t, v| t.sigmoid(v[0]), &|x| ops::sigmoid(&x[0]), rng);
            (err, format!("x[{b},{c},{d}]"))
        }
        LayerUnderTest::Linear => {
            let out = rng.random_range(1..=6usize);
            let with_bias = rng.random_bool(0.7);
            let mut inputs = vec![randn(&[b, c], rng), randn(&[out, c], rng)];
            if with_bias {
                inputs.push(randn(&[out], rng));
            }
            let err = max_grad_error(
                &inputs,
                &|t, v| t.linear(v[0], v[1], v.get(2).copied()).unwrap(),
                &|x| ops::linear(&x[0], &x[1], x.get(2)).unwrap(),
                rng,
            );
            (err, format!("x[{b},{c}] w[{out},{c}] bias {with_bias}"))
        }
        LayerUnderTest::Pooling => {
            let inputs = vec![randn(&[b, c, d], rng)];
            let err = max_grad_error(
                &inputs,
                &|t, v| t.mean_pool(v[0]).unwrap(),
                &|x| ops::global_avg_pool(&x[0]).unwrap(),
                rng,
            );
            (err, format!("x[{b},{c},{d}]"))
        }
        LayerUnderTest::Gate => {
            // squeeze, excite and scale composed, differentiated w.r.t. U, W1, W2
            let hidden = rng.random_range(1..=6usize);
            let inputs = loop {
                let cand = vec![randn(&[b, c, d], rng), randn(&[hidden, c], rng), randn(&[c, hidden], rng)];
                let z = ops::global_avg_pool(&cand[0]).unwrap();
                let pre = ops::linear(&z, &cand[1], None).unwrap();
                if pre.data().iter().all(|v| v.abs() > 1e-3) {
                    break cand;
                }
            };
            let err = max_grad_error(
                &inputs,
                &|t, v| {
                    let z = t.mean_pool(v[0]).unwrap();
                    let a = t.linear(z, v[1], None).unwrap();
                    let a = t.relu(a);
                    let s = t.linear(a, v[2], None).unwrap();
                    let g = t.sigmoid(s);
                    t.channel_scale(v[0], g).unwrap()
                },
                &|x| {
                    let z = ops::global_avg_pool(&x[0]).unwrap();
                    let a = ops::relu(&ops::linear(&z, &x[1], None).unwrap());
                    let g = ops::sigmoid(&ops::linear(&a, &x[2], None).unwrap());
                    ops::channel_scale(&x[0], &g).unwrap()
                },
                rng,
            );
            (err, format!("U[{b},{c},{d}] hidden {hidden}"))
        }
        LayerUnderTest::ResidualAdd => {
            // block output plus skip, so both branches see the same input
            let inputs = vec![randn(&[b, c, d], rng), randn(&[c, c, 1], rng)];
            let err = max_grad_error(
                &inputs,
                &|t, v| {
                    let y = t.conv1d(v[0], v[1], None, 1, 0).unwrap();
                    t.add(y, v[0]).unwrap()
                },
                &|x| {
                    let y = ops::conv1d_batch(&x[0], &x[1], None, 1, 0).unwrap();
                    ops::add(&y, &x[0]).unwrap()
                },
                rng,
            );
            (err, format!("x[{b},{c},{d}]"))
        }
    }
}

/// Worst error over `shapes` random shapes of `layer`, with the shape that produced it.
pub fn check_layer_shapes(layer: LayerUnderTest, shapes: usize, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shapes)
        .map(|_| check_layer(layer, &mut rng))
        .fold((0.0, String::new()), |acc, cur| if cur.0 > acc.0 { cur } else { acc })
}

/// Hand evaluation of the final accuracy, forgetting and learning accuracy
/// of an upper-triangular accuracy matrix given as rows `A[t][t..]`.
pub fn metrics_by_hand(rows: &[Vec<f64>]) -> (f64, f64, f64) {
    let n = rows.len();
    let last: Vec<f64> = rows.iter().map(|r| *r.last().unwrap()).collect();
    let fa = last.iter().sum::<f64>() / n as f64;
    let mut fm = 0.0;
    for r in rows {
        let mut best = f64::NEG_INFINITY;
        for &v in r {
            if v > best {
                best = v;
            }
        }
        fm += best - r[r.len() - 1];
    }
    let la = rows.iter().map(|r| r[0]).sum::<f64>() / n as f64;
    (fa, fm / n as f64, la)
}
