mod common;

use common::randn;
use gatecl::data::{generate_synthetic, preprocess, PreprocessConfig, SyntheticSpec};
use gatecl::model::{apply_gate, BackboneConfig, GatedModel, ModelConfig};
use gatecl::numerics::Tensor;
use gatecl::theory::{
    argmax, backbone_centroids, check_feature_drift, check_logit_drift, check_margin_stability,
    cross_subject_correlation, fit_expressiveness, margin, model_drift_report, pearson, spectral_norm, ALPHA_MARGIN,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn svd_norm(w: &Tensor<f64>) -> f64 {
    let m = DMatrix::from_row_slice(w.dim(0), w.dim(1), w.data());
    m.singular_values().max()
}

#[test]
fn spectral_norm_matches_an_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut shapes = vec![[1, 7], [7, 1], [6, 512], [512, 6], [40, 40]];
    for _ in 0..15 {
        shapes.push([rng.random_range(1..30), rng.random_range(1..30)]);
    }
    for [r, c] in shapes {
        let w = randn(&[r, c], &mut rng);
        let want = svd_norm(&w);
        let got = spectral_norm(&w).unwrap();
        assert!((got - want).abs() <= 1e-6 * want, "{r}x{c}: {got} vs {want}");
    }
    // rank one and a repeated top singular value
    let u = randn(&[9, 1], &mut rng);
    let v = randn(&[1, 5], &mut rng);
    let outer = Tensor::new(&[9, 5], (0..45).map(|i| u.data()[i / 5] * v.data()[i % 5]).collect()).unwrap();
    assert!((spectral_norm(&outer).unwrap() - svd_norm(&outer)).abs() <= 1e-6 * svd_norm(&outer));
    let eye = Tensor::new(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 2.0 } else { 0.0 }).collect()).unwrap();
    assert!((spectral_norm(&eye).unwrap() - 2.0).abs() <= 1e-9);
    assert_eq!(spectral_norm(&Tensor::zeros(&[3, 2]).unwrap()).unwrap(), 0.0);
}

#[test]
fn feature_drift_hand_example() {
    let u = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let g = Tensor::from_f64(&[2], &[0.5, 0.2]).unwrap();
    let g2 = Tensor::from_f64(&[2], &[0.1, 0.3]).unwrap();
    let r = check_feature_drift(&u, &g, &g2).unwrap();
    // rows move by -0.4·(1, 2) and 0.1·(3, 4)
    assert!((r.lhs - (0.16 * 5.0 + 0.01 * 25.0f64).sqrt()).abs() < 1e-15);
    assert!((r.delta - 0.4).abs() < 1e-15);
    assert!((r.rhs - 0.4 * 30f64.sqrt()).abs() < 1e-14);
    assert!(r.holds);
    assert!(check_feature_drift(&u, &Tensor::from_f64(&[2], &[1.0, 0.5]).unwrap(), &g).is_err());
}

#[test]
fn margin_hand_examples() {
    assert_eq!(margin(&[2.0, 1.0, 0.0], 0).unwrap(), 1.0);
    assert_eq!(margin(&[2.0, 1.0, 0.0], 2).unwrap(), -2.0);
    assert_eq!(argmax(&[0.0, 3.0, 3.0]), 1);
    let c = check_margin_stability(&[2.0, 1.0, 0.0], &[1.51, 1.49, 0.2], 0).unwrap().unwrap();
    assert!(c.premise && c.preserved);
    // just past half the margin the label can flip
    let c = check_margin_stability(&[2.0, 1.0, 0.0], &[1.49, 1.51, 0.0], 0).unwrap().unwrap();
    assert!(!c.premise && !c.preserved && !c.violated());
}

/// Independent evaluation of the pooled-feature and logit drift terms.
fn logit_oracle(u: &Tensor<f64>, g: &[f64], g2: &[f64], w: &Tensor<f64>, w2: &Tensor<f64>) -> (f64, f64, f64) {
    let (c, d) = (u.dim(0), u.dim(1));
    let pooled = |g: &[f64]| -> Vec<f64> { (0..c).map(|i| g[i] * u.data()[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64).collect() };
    let (h, h2) = (pooled(g), pooled(g2));
    let k = w.dim(0);
    let logits = |w: &Tensor<f64>, h: &[f64]| -> Vec<f64> { (0..k).map(|r| (0..c).map(|i| w.data()[r * c + i] * h[i]).sum()).collect() };
    let (y, y2) = (logits(w, &h), logits(w2, &h2));
    let norm = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let hdiff = norm(&h2, &h);
    let hfull: f64 = (0..c * d)
        .map(|j| ((g2[j / d] - g[j / d]) * u.data()[j]).powi(2))
        .sum::<f64>()
        .sqrt();
    (norm(&y2, &y), hdiff, hfull / (d as f64).sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn logit_drift_agrees_with_an_independent_forward(seed in any::<u64>(), c in 1usize..12, d in 1usize..20, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = randn(&[c, d], &mut rng);
        let g: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..0.99)).collect();
        let g2: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..0.99)).collect();
        let w = randn(&[k, c], &mut rng);
        let w2 = randn(&[k, c], &mut rng);
        let r = check_logit_drift(&u, &Tensor::new(&[c], g.clone()).unwrap(), &Tensor::new(&[c], g2.clone()).unwrap(), &w, &w2).unwrap();
        let (drift, hdiff, hbound) = logit_oracle(&u, &g, &g2, &w, &w2);
        prop_assert!((r.drift - drift).abs() <= 1e-10 * (1.0 + drift));
        prop_assert!((r.pooled_drift - hdiff).abs() <= 1e-10 * (1.0 + hdiff));
        // pooling sub-bound, checked independently of the library
        prop_assert!(hdiff <= hbound + 1e-12);
        prop_assert!(r.holds && r.pooled_holds);
        prop_assert!(drift <= svd_norm(&w2) * hdiff + svd_norm(&w2.zip_map(&w, |a, b| a - b).unwrap()) * r.h_norm + 1e-9);
    }

    #[test]
    fn constructed_gates_reproduce_scaled_features(seed in any::<u64>(), c in 1usize..16, d in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = randn(&[c, d], &mut rng);
        let s: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..20.0)).collect();
        let fit = fit_expressiveness(&u, &s, &Tensor::zeros(&[c, d]).unwrap()).unwrap();
        let smax = s.iter().cloned().fold(0.0, f64::max);
        prop_assert!((fit.alpha - (1.0 + ALPHA_MARGIN) * smax).abs() <= 1e-12 * smax);
        prop_assert!(fit.gate.iter().all(|&g| g > 0.0 && g < 1.0));
        let got = apply_gate(&u, &Tensor::new(&[c], fit.gate.clone()).unwrap()).unwrap();
        let want = apply_gate(&u, &Tensor::new(&[c], s.iter().map(|v| v / fit.alpha).collect()).unwrap()).unwrap();
        let err = got.zip_map(&want, |a, b| a - b).unwrap().norm_fro();
        prop_assert!(err <= 1e-10 * want.norm_fro().max(1e-300));
    }

    #[test]
    fn pearson_is_scale_and_shift_invariant(xs in proptest::collection::vec(-10.0f64..10.0, 3..20), a in 0.1f64..5.0, b in -5.0f64..5.0) {
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let r = pearson(&xs, &ys);
        let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            prop_assert!((r - 1.0).abs() < 1e-9);
            let neg: Vec<f64> = ys.iter().map(|y| -y).collect();
            prop_assert!((pearson(&xs, &neg) + 1.0).abs() < 1e-9);
        }
    }
}

fn noiseless_windows(subjects: usize) -> Vec<gatecl::data::WindowSample> {
    let spec = SyntheticSpec {
        subjects,
        noise: 0.0,
        ..SyntheticSpec::default()
    };
    let cfg = PreprocessConfig {
        zscore: false,
        window_len: None,
        target_len: 32,
    };
    preprocess(&generate_synthetic(&spec).unwrap(), &cfg).unwrap().0
}

#[test]
fn correlation_of_identical_subjects_is_one_on_the_diagonal() {
    let windows = noiseless_windows(1);
    let mut model = GatedModel::<f64>::new(ModelConfig::new(BackboneConfig::reference(9).scaled(32), 6), 5).unwrap();
    let mut twin = windows.clone();
    twin.iter_mut().for_each(|w| w.t += 100);
    let mut all = windows;
    all.extend(twin);
    let centroids = backbone_centroids(&mut model, &all).unwrap();
    let corr = cross_subject_correlation(&centroids).unwrap();
    assert_eq!(corr.pairs, 1);
    for c in 0..corr.channels {
        let v = corr.get(c, c);
        // channels that never activate have no defined correlation
        assert!((v - 1.0).abs() < 1e-9 || v == 0.0, "channel {c}: {v}");
    }
    for c in 0..corr.channels {
        for c2 in 0..corr.channels {
            assert!((corr.get(c, c2) - corr.get(c2, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn model_drift_bounds_hold_when_only_the_last_gate_and_classifier_move() {
    let windows = noiseless_windows(2);
    let cfg = ModelConfig::new(BackboneConfig::reference(9).scaled(32), 6);
    let mut before = GatedModel::<f64>::new(cfg, 9).unwrap();
    before.freeze_backbone();
    let mut after = before.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let last = *after.gate_params(0).last().unwrap();
    let ids = [last.w1, last.w2, after.classifier_weight()];
    for id in ids {
        let p = after.params_mut().get_mut(id);
        let noise = randn(p.value.shape(), &mut rng);
        p.value = p.value.zip_map(&noise, |a, n| a + 0.3 * n).unwrap();
    }
    let rep = model_drift_report(&mut before, &mut after, &windows).unwrap();
    assert_eq!(rep.samples.len(), windows.len());
    assert_eq!(rep.applicable, windows.len());
    assert_eq!(rep.violations, 0);
    for s in &rep.samples {
        assert!(s.logit_drift <= s.gate_term + s.classifier_term + 1e-9);
        assert!(s.delta > 0.0);
    }

    // an earlier gate moving changes the last stack's input: no longer applicable
    let mut shifted = before.clone();
    let first = shifted.gate_params(0)[0];
    let p = shifted.params_mut().get_mut(first.w2);
    p.value = p.value.map(|v| v + 0.5);
    let rep = model_drift_report(&mut before, &mut shifted, &windows[..5]).unwrap();
    assert_eq!(rep.applicable, 0);

    let mut other = GatedModel::<f64>::new(ModelConfig::new(BackboneConfig::reference(9).scaled(32), 6), 10).unwrap();
    assert!(model_drift_report(&mut before, &mut other, &windows[..2]).is_err());
}
