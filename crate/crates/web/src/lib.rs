//! Browser bindings for three small interactive views: synthetic subject
//! signals with and without a constructed channel gate, the logit drift bound
//! under slider-controlled gate and classifier moves, and a margin sweep.
//!
//! Every exported function returns a JSON string for the page to parse. The
//! plain-Rust functions behind them are usable (and tested) natively.

use gatecl::data::{generate_synthetic, SyntheticSpec};
use gatecl::numerics::Tensor;
use gatecl::theory::{argmax, check_logit_drift, check_margin_stability, fit_expressiveness, margin};
use gatecl::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct SubjectTrace {
    pub subject: u32,
    pub scale: f64,
    pub raw: Vec<f64>,
    /// The trace after the constructed gate, rescaled by its `α`.
    pub gated: Vec<f64>,
}

/// First recording of `class` for each of `subjects` synthetic subjects,
/// channel `channel` only.
pub fn subject_traces(subjects: usize, class: usize, channel: usize, seed: u64) -> Result<Vec<SubjectTrace>> {
    let spec = SyntheticSpec {
        subjects,
        recordings_per_class: 1,
        noise: 0.0,
        seed,
        ..SyntheticSpec::default()
    };
    if class >= spec.classes || channel >= spec.channels {
        return Err(Error::InvalidArgument(format!(
            "class must be below {} and channel below {}",
            spec.classes, spec.channels
        )));
    }
    let gains = spec.subject_specs();
    let data = generate_synthetic(&spec)?;
    let mut out = Vec::with_capacity(subjects);
    for (rec, subject) in data.recordings.iter().filter(|r| r.activity == class).zip(&gains) {
        let u = &rec.samples;
        let len = u.dim(1);
        // undo the subject's channel gains; a gate can do this up to a global factor
        let target: Vec<f64> = subject.scale.iter().map(|s| 1.0 / s).collect();
        let fit = fit_expressiveness(u, &target, &Tensor::zeros(u.shape())?)?;
        let row = &u.data()[channel * len..(channel + 1) * len];
        let g = fit.gate[channel] * fit.alpha;
        out.push(SubjectTrace {
            subject: rec.subject,
            scale: subject.scale[channel],
            raw: row.to_vec(),
            gated: row.iter().map(|v| v * g).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct DriftPoint {
    pub drift: f64,
    pub gate_term: f64,
    pub classifier_term: f64,
    pub pooled_drift: f64,
    pub pooled_bound: f64,
    pub holds: bool,
}

/// Logit drift of a random `channels × length` feature map when every gate
/// moves by up to `gate_step` and the classifier by `weight_step` (relative).
pub fn drift_point(channels: usize, length: usize, gate_step: f64, weight_step: f64, seed: u64) -> Result<DriftPoint> {
    if channels == 0 || length == 0 {
        return Err(Error::InvalidArgument("channels and length must be positive".into()));
    }
    let classes = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Tensor::<f64>::randn(&[channels, length], 1.0, &mut rng)?.map(|v| v.max(0.0));
    let g: Vec<f64> = (0..channels).map(|_| rng.random_range(0.05..0.95)).collect();
    let g_new: Vec<f64> = g
        .iter()
        .map(|v| (v + gate_step * rng.random_range(-1.0..1.0)).clamp(1e-6, 1.0 - 1e-6))
        .collect();
    let w = Tensor::<f64>::randn(&[classes, channels], 1.0 / (channels as f64).sqrt(), &mut rng)?;
    let noise = Tensor::<f64>::randn(&[classes, channels], 1.0 / (channels as f64).sqrt(), &mut rng)?;
    let w_new = w.zip_map(&noise, |a, n| a + weight_step * n)?;
    let r = check_logit_drift(&u, &Tensor::new(&[channels], g)?, &Tensor::new(&[channels], g_new)?, &w, &w_new)?;
    Ok(DriftPoint {
        drift: r.drift,
        gate_term: r.gate_term,
        classifier_term: r.classifier_term,
        pooled_drift: r.pooled_drift,
        pooled_bound: r.pooled_bound,
        holds: r.holds,
    })
}

#[derive(Debug, Serialize)]
pub struct MarginStep {
    /// Perturbation size as a fraction of the margin.
    pub fraction: f64,
    /// The label drops and the runner-up rises by `fraction·m`.
    pub worst_case_flips: bool,
    /// Share of random perturbations of that sup-norm that flip the label.
    pub random_flip_rate: f64,
}

#[derive(Debug, Serialize)]
pub struct MarginSweep {
    pub label: usize,
    pub margin: f64,
    pub steps: Vec<MarginStep>,
}

/// Sweep perturbation sizes from 0 to the full margin of `logits`.
pub fn margin_sweep(logits: &[f64], steps: usize, trials: usize, seed: u64) -> Result<MarginSweep> {
    if logits.len() < 2 || steps == 0 {
        return Err(Error::InvalidArgument("need at least two logits and one step".into()));
    }
    let label = argmax(logits);
    let m = margin(logits, label)?;
    if m <= 0.0 {
        return Err(Error::InvalidArgument("the top two logits tie, so there is no margin".into()));
    }
    let runner = argmax(&logits.iter().enumerate().map(|(i, &v)| if i == label { f64::NEG_INFINITY } else { v }).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let fraction = i as f64 / steps as f64;
        let r = fraction * m;
        let mut worst = logits.to_vec();
        worst[label] -= r;
        worst[runner] += r;
        let mut flips = 0usize;
        for _ in 0..trials {
            let moved: Vec<f64> = logits.iter().map(|v| v + r * rng.random_range(-1.0..=1.0)).collect();
            if check_margin_stability(logits, &moved, label)?.is_some_and(|c| !c.preserved) {
                flips += 1;
            }
        }
        out.push(MarginStep {
            fraction,
            worst_case_flips: argmax(&worst) != label,
            random_flip_rate: if trials == 0 { 0.0 } else { flips as f64 / trials as f64 },
        });
    }
    Ok(MarginSweep { label, margin: m, steps: out })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = subjectTraces)]
pub fn subject_traces_js(subjects: usize, class: usize, channel: usize, seed: u64) -> std::result::Result<String, JsError> {
    to_js(subject_traces(subjects, class, channel, seed))
}

#[wasm_bindgen(js_name = driftPoint)]
pub fn drift_point_js(channels: usize, length: usize, gate_step: f64, weight_step: f64, seed: u64) -> std::result::Result<String, JsError> {
    to_js(drift_point(channels, length, gate_step, weight_step, seed))
}

#[wasm_bindgen(js_name = marginSweep)]
pub fn margin_sweep_js(logits: Vec<f64>, steps: usize, trials: usize, seed: u64) -> std::result::Result<String, JsError> {
    to_js(margin_sweep(&logits, steps, trials, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gated_traces_coincide_across_subjects() {
        let traces = subject_traces(4, 2, 5, 0).unwrap();
        assert_eq!(traces.len(), 4);
        assert!(traces.windows(2).any(|p| (p[0].scale - p[1].scale).abs() > 1e-3));
        // noiseless subjects differ only by gain, so the gated traces share a shape up to α
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let unit = |v: &[f64]| v.iter().map(|x| x / norm(v)).collect::<Vec<_>>();
        let first = unit(&traces[0].gated);
        for t in &traces[1..] {
            let diff: f64 = unit(&t.gated).iter().zip(&first).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "subject {}: {diff}", t.subject);
        }
        assert!(subject_traces(2, 99, 0, 0).is_err());
    }

    #[test]
    fn drift_stays_inside_its_bound() {
        for (gs, ws) in [(0.0, 0.0), (0.3, 0.0), (0.0, 0.5), (1.0, 1.0)] {
            let p = drift_point(32, 20, gs, ws, 4).unwrap();
            assert!(p.holds && p.drift <= p.gate_term + p.classifier_term + 1e-9);
            assert!(p.pooled_drift <= p.pooled_bound + 1e-12);
        }
        assert_eq!(drift_point(8, 8, 0.0, 0.0, 1).unwrap().drift, 0.0);
    }

    #[test]
    fn flips_only_past_half_the_margin() {
        let sweep = margin_sweep(&[3.0, 1.0, 0.5], 20, 200, 9).unwrap();
        assert_eq!(sweep.label, 0);
        assert_eq!(sweep.margin, 2.0);
        for s in &sweep.steps {
            if s.fraction < 0.5 {
                assert!(!s.worst_case_flips && s.random_flip_rate == 0.0, "{s:?}");
            }
        }
        assert!(sweep.steps.last().unwrap().worst_case_flips);
        assert!(margin_sweep(&[1.0, 1.0], 4, 1, 0).is_err());
    }
}
