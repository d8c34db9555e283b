use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::drift::{check_feature_drift, check_logit_drift};
use super::expressiveness::fit_expressiveness;
use super::margin::{argmax, check_margin_stability, margin, CorollaryCheck};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::seeds::derive;

/// Tolerance on exact identities (relative Frobenius error or max deviation).
pub const EXACT_TOL: f64 = 1e-10;

/// Outcome of one randomized check family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub samples: usize,
    pub violations: usize,
    pub skipped: usize,
    /// Largest observed lhs/bound ratio (≤ 1 when every bound held).
    pub extremal_ratio: f64,
    /// Suite-specific counters and extremes.
    pub notes: BTreeMap<String, f64>,
    /// The instance with the largest ratio, for reproduction.
    pub worst: Option<serde_json::Value>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        SuiteReport {
            name: name.into(),
            samples: 0,
            violations: 0,
            skipped: 0,
            extremal_ratio: 0.0,
            notes: BTreeMap::new(),
            worst: None,
        }
    }

    fn note(&mut self, key: &str, value: f64) {
        self.notes.insert(key.into(), value);
    }

    fn bump(&mut self, key: &str) {
        *self.notes.entry(key.into()).or_insert(0.0) += 1.0;
    }

    fn observe(&mut self, ratio: f64, instance: impl FnOnce() -> serde_json::Value) {
        if ratio > self.extremal_ratio || self.worst.is_none() {
            self.extremal_ratio = ratio;
            self.worst = Some(instance());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub feature_drift_samples: usize,
    pub logit_drift_samples: usize,
    pub margin_samples: usize,
    pub expressiveness_draws: usize,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            feature_drift_samples: 10_000,
            logit_drift_samples: 1_000,
            margin_samples: 100_000,
            expressiveness_draws: 100,
            channels: 64,
            length: 50,
            classes: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub config: VerifyConfig,
    pub suites: Vec<SuiteReport>,
    pub total_violations: usize,
}

const GATE_EPS: f64 = 1e-6;

fn normal_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    GATE_EPS + (1.0 - 2.0 * GATE_EPS) * rng.random::<f64>()
}

fn random_gate<R: Rng>(c: usize, rng: &mut R) -> Tensor<f64> {
    Tensor::new(&[c], (0..c).map(|_| open_unit(rng)).collect()).expect("valid shape")
}

/// `g` moved by at most `step` per channel, kept inside the open interval.
fn nudged_gate<R: Rng>(g: &Tensor<f64>, step: f64, rng: &mut R) -> Tensor<f64> {
    let data = g
        .data()
        .iter()
        .map(|&v| (v + step * rng.random_range(-1.0..1.0)).clamp(GATE_EPS, 1.0 - GATE_EPS))
        .collect();
    Tensor::new(g.shape(), data).expect("valid shape")
}

fn log_uniform<R: Rng>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
}

/// Feature drift against `δ·‖U‖_F` on random instances, plus the equality
/// case and single-active-channel tightness.
pub fn feature_drift_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("feature_drift");
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[cfg.seed, 1]));
    let (c, d) = (cfg.channels, cfg.length);
    for _ in 0..cfg.feature_drift_samples {
        let u = normal_tensor(&[c, d], &mut rng);
        let g = random_gate(c, &mut rng);
        let g2 = random_gate(c, &mut rng);
        let r = check_feature_drift(&u, &g, &g2)?;
        rep.samples += 1;
        if !r.holds {
            rep.violations += 1;
        }
        rep.observe(r.ratio(), || json!({ "u": u.data(), "shape": [c, d], "g": g.data(), "g_new": g2.data(), "lhs": r.lhs, "rhs": r.rhs }));
    }
    // equality case
    let u = normal_tensor(&[c, d], &mut rng);
    let g = random_gate(c, &mut rng);
    let eq = check_feature_drift(&u, &g, &g)?;
    rep.note("equality_exact", f64::from(u8::from(eq.lhs == 0.0 && eq.rhs == 0.0)));
    if !(eq.lhs == 0.0 && eq.rhs == 0.0) {
        rep.violations += 1;
    }
    // one active channel, placed where the gates differ most
    let mut tight = f64::INFINITY;
    for _ in 0..100 {
        let g = random_gate(c, &mut rng);
        let g2 = random_gate(c, &mut rng);
        let diffs: Vec<f64> = g.data().iter().zip(g2.data()).map(|(a, b)| (a - b).abs()).collect();
        let k = argmax(&diffs);
        let mut u = Tensor::zeros(&[c, d])?;
        for j in 0..d {
            u.data_mut()[k * d + j] = StandardNormal.sample(&mut rng);
        }
        tight = tight.min(check_feature_drift(&u, &g, &g2)?.ratio());
    }
    rep.note("single_channel_min_ratio", tight);
    Ok(rep)
}

/// Logit drift against the gate-plus-classifier bound, the pooling sub-bound
/// and the margin corollary on the same instances.
pub fn logit_drift_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("logit_drift");
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[cfg.seed, 2]));
    let (c, d, k) = (cfg.channels, cfg.length, cfg.classes);
    let mut pooled_violations = 0usize;
    let mut corollary_premises = 0usize;
    for i in 0..cfg.logit_drift_samples {
        let u = normal_tensor(&[c, d], &mut rng).map(|v| v.max(0.0));
        let g = random_gate(c, &mut rng);
        let w = normal_tensor(&[k, c], &mut rng).map(|v| v / (c as f64).sqrt());
        // every fifth instance collapses one of the two drift sources
        let gate_step = if i % 5 == 1 { 0.0 } else { log_uniform(1e-5, 1.0, &mut rng) };
        let w_step = if i % 5 == 2 { 0.0 } else { log_uniform(1e-5, 1.0, &mut rng) };
        let g2 = if gate_step == 0.0 { g.clone() } else { nudged_gate(&g, gate_step, &mut rng) };
        let noise = normal_tensor(&[k, c], &mut rng);
        let w2 = w.zip_map(&noise, |a, n| a + w_step * n / (c as f64).sqrt())?;
        let r = check_logit_drift(&u, &g, &g2, &w, &w2)?;
        rep.samples += 1;
        let collapse_ok = match i % 5 {
            1 => r.gate_term == 0.0,
            2 => r.classifier_term == 0.0,
            _ => true,
        };
        if !r.holds || !collapse_ok {
            rep.violations += 1;
        }
        if !r.pooled_holds {
            pooled_violations += 1;
            rep.violations += 1;
        }
        let bound = r.bound();
        let ratio = if bound > 0.0 { r.drift / bound } else { f64::from(u8::from(r.drift > 0.0)) };
        rep.observe(ratio, || {
            json!({ "shape": [c, d], "classes": k, "u": u.data(), "g": g.data(), "g_new": g2.data(),
                    "w": w.data(), "w_new": w2.data(), "drift": r.drift, "bound": bound })
        });
        // corollary: the composite bound below half the margin preserves the label
        let y_old = pooled_logits(&u, &g, &w)?;
        let y_new = pooled_logits(&u, &g2, &w2)?;
        let label = argmax(&y_old);
        let m = margin(&y_old, label)?;
        if m <= 0.0 {
            rep.skipped += 1;
            continue;
        }
        let check = CorollaryCheck::new(m, bound, argmax(&y_new) == label);
        if check.premise {
            corollary_premises += 1;
        }
        if check.violated() {
            rep.violations += 1;
            rep.bump("corollary_violations");
        }
    }
    rep.note("pooling_violations", pooled_violations as f64);
    rep.note("corollary_premises", corollary_premises as f64);
    Ok(rep)
}

fn pooled_logits(u: &Tensor<f64>, g: &Tensor<f64>, w: &Tensor<f64>) -> Result<Vec<f64>> {
    let h = crate::model::apply_gate(u, g)?;
    let (c, d) = (u.dim(0), u.dim(1));
    let pooled = crate::numerics::ops::global_avg_pool(&h.reshape(&[1, c, d])?)?;
    Ok(crate::numerics::ops::linear(&pooled, w, None)?.into_data())
}

/// Random logits perturbed strictly inside half the margin never flip; a
/// constructed perturbation just beyond half the margin does.
pub fn margin_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("margin_stability");
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[cfg.seed, 3]));
    let mut constructed_flips = 0usize;
    for _ in 0..cfg.margin_samples {
        let k = rng.random_range(2..=10);
        let logits: Vec<f64> = (0..k).map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let y = argmax(&logits);
        let m = margin(&logits, y)?;
        if m <= 0.0 {
            rep.skipped += 1;
            continue;
        }
        let radius = rng.random::<f64>() * m / 2.0;
        let mut p: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pmax = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if pmax > 0.0 {
            p.iter_mut().for_each(|v| *v *= radius / pmax);
        }
        let moved: Vec<f64> = logits.iter().zip(&p).map(|(a, b)| a + b).collect();
        let Some(check) = check_margin_stability(&logits, &moved, y)? else {
            rep.skipped += 1;
            continue;
        };
        rep.samples += 1;
        if check.violated() {
            rep.violations += 1;
            rep.observe(f64::INFINITY, || json!({ "logits": logits, "perturbed": moved, "label": y }));
        } else if check.premise {
            rep.observe(check.perturbation / (m / 2.0), || json!({ "logits": logits, "perturbed": moved, "label": y }));
        }
        // push the label down and the runner-up up by 0.51·m
        let runner = argmax(&logits.iter().enumerate().map(|(i, &v)| if i == y { f64::NEG_INFINITY } else { v }).collect::<Vec<_>>());
        let mut adv = logits.clone();
        adv[y] -= 0.51 * m;
        adv[runner] += 0.51 * m;
        if argmax(&adv) != y {
            constructed_flips += 1;
        }
    }
    rep.note("constructed_flips", constructed_flips as f64);
    Ok(rep)
}

/// Constructed gates reproduce scaled subject features exactly without a
/// residual and within the residual bound with one.
pub fn expressiveness_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("expressiveness");
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[cfg.seed, 4]));
    let (c, d) = (cfg.channels, cfg.length);
    let mut worst_exact = 0.0f64;
    let mut worst_identity = 0.0f64;
    for i in 0..2 * cfg.expressiveness_draws {
        let exact = i % 2 == 0;
        let u = normal_tensor(&[c, d], &mut rng);
        let s: Vec<f64> = (0..c).map(|_| log_uniform(0.1, 10.0, &mut rng)).collect();
        let eps = if exact {
            Tensor::zeros(&[c, d])?
        } else {
            let raw = normal_tensor(&[c, d], &mut rng);
            let st = crate::model::apply_gate(&u, &Tensor::new(&[c], s.clone())?)?;
            let target = 0.1 * st.norm_fro();
            let n = raw.norm_fro();
            raw.map(|v| v * target / n)
        };
        let fit = fit_expressiveness(&u, &s, &eps)?;
        rep.samples += 1;
        let mut ok = fit.holds && fit.gate_in_range;
        if exact {
            let scaled = crate::model::apply_gate(&u, &Tensor::new(&[c], s.clone())?)?.norm_fro() / fit.alpha;
            let rel = fit.residual / scaled;
            worst_exact = worst_exact.max(rel);
            ok &= rel <= EXACT_TOL;
        } else {
            worst_identity = worst_identity.max(fit.identity_error);
            ok &= fit.identity_error <= EXACT_TOL;
        }
        if !ok {
            rep.violations += 1;
        }
        let ratio = if fit.bound > 0.0 { fit.residual / fit.bound } else { 0.0 };
        rep.observe(ratio, || json!({ "exact": exact, "scale": s, "alpha": fit.alpha, "residual": fit.residual, "bound": fit.bound }));
    }
    rep.note("exact_max_relative_error", worst_exact);
    rep.note("identity_max_error", worst_identity);
    Ok(rep)
}

pub fn run_all(cfg: &VerifyConfig) -> Result<VerificationReport> {
    let suites = vec![
        feature_drift_suite(cfg)?,
        logit_drift_suite(cfg)?,
        margin_suite(cfg)?,
        expressiveness_suite(cfg)?,
    ];
    let total_violations = suites.iter().map(|s| s.violations).sum();
    Ok(VerificationReport {
        config: cfg.clone(),
        suites,
        total_violations,
    })
}
