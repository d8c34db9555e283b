use serde::{Deserialize, Serialize};

use super::margin::{argmax, margin, CorollaryCheck, MarginCheck, check_margin_stability};
use super::spectral::spectral_norm;
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::{GateMode, GatedModel};
use crate::numerics::Tensor;

/// Per-sample drift between two gated models sharing one frozen backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub subject: u32,
    pub label: usize,
    /// Margin of the earlier model's logits with respect to the true label.
    pub margin: f64,
    /// `‖g′ − g‖_∞` at the last stack.
    pub delta: f64,
    pub logit_drift: f64,
    pub gate_term: f64,
    /// Includes the bias change: `‖[W′ b′] − [W b]‖₂·‖[h; 1]‖₂`.
    pub classifier_term: f64,
    /// `‖U′ − U‖_F` at the last stack; the bound assumes it is zero, which
    /// holds only when earlier gates did not move.
    pub feature_shift: f64,
    pub applicable: bool,
    pub margin_check: Option<MarginCheck>,
    pub corollary: Option<CorollaryCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDriftReport {
    pub samples: Vec<SampleVerdict>,
    pub applicable: usize,
    pub corollary_premises: usize,
    pub violations: usize,
    pub skipped_nonpositive_margin: usize,
}

/// Tolerance below which the last-stack input is treated as unchanged.
const SHIFT_TOL: f64 = 1e-9;

fn augmented(w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
    let (k, c) = (w.dim(0), w.dim(1));
    let mut out = Vec::with_capacity(k * (c + 1));
    for r in 0..k {
        out.extend_from_slice(&w.data()[r * c..(r + 1) * c]);
        out.push(b.map_or(0.0, |b| b.data()[r]));
    }
    Tensor::new(&[k, c + 1], out)
}

/// Evaluate the drift bound, margin stability and the corollary for every
/// sample between `before` and `after` (same frozen backbone, task-free gates).
pub fn model_drift_report(
    before: &mut GatedModel<f64>,
    after: &mut GatedModel<f64>,
    samples: &[WindowSample],
) -> Result<ModelDriftReport> {
    for m in [&*before, &*after] {
        if !m.has_gates() || m.config().adapters.layers > 0 || m.config().mode != GateMode::TaskFree {
            return Err(Error::invalid("drift verdicts need task-free gates feeding the classifier directly"));
        }
    }
    if before.backbone_checksum() != after.backbone_checksum() {
        return Err(Error::invalid("models do not share a backbone"));
    }
    let w = before.params().value(before.classifier_weight()).clone();
    let w_new = after.params().value(after.classifier_weight()).clone();
    let b = before.classifier_bias().map(|id| before.params().value(id).clone());
    let b_new = after.classifier_bias().map(|id| after.params().value(id).clone());
    let w_new_norm = spectral_norm(&w_new)?;
    let diff = augmented(&w_new, b_new.as_ref())?.zip_map(&augmented(&w, b.as_ref())?, |x, y| x - y)?;
    let diff_norm = spectral_norm(&diff)?;

    let mut rep = ModelDriftReport {
        samples: Vec::with_capacity(samples.len()),
        applicable: 0,
        corollary_premises: 0,
        violations: 0,
        skipped_nonpositive_margin: 0,
    };
    for s in samples {
        let (y0, t0) = before.model_forward(&s.x, None, true)?;
        let (y1, t1) = after.model_forward(&s.x, None, true)?;
        let (t0, t1) = (t0.expect("captured"), t1.expect("captured"));
        let (l0, l1) = (t0.layers.last().expect("stacks"), t1.layers.last().expect("stacks"));
        let (g0, g1) = (l0.g.as_ref().expect("gated"), l1.g.as_ref().expect("gated"));
        let delta = g0
            .data()
            .iter()
            .zip(g1.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let feature_shift = l1.u.zip_map(&l0.u, |a, b| a - b)?.norm_fro();
        let d = l0.u.dim(1) as f64;
        let h_aug = (t0.pooled.sum_squares() + 1.0).sqrt();
        let gate_term = w_new_norm * delta / d.sqrt() * l0.u.norm_fro();
        let classifier_term = diff_norm * h_aug;
        let logit_drift = y1.zip_map(&y0, |a, b| a - b)?.norm_fro();
        let applicable = feature_shift <= SHIFT_TOL;
        let m = margin(y0.data(), s.y)?;
        let margin_check = check_margin_stability(y0.data(), y1.data(), s.y)?;
        let corollary = (m > 0.0).then(|| CorollaryCheck::new(m, gate_term + classifier_term, argmax(y1.data()) == s.y));
        if m <= 0.0 {
            rep.skipped_nonpositive_margin += 1;
        }
        if applicable {
            rep.applicable += 1;
            if logit_drift > gate_term + classifier_term + super::drift::BOUND_TOL {
                rep.violations += 1;
            }
            if let Some(c) = &corollary {
                rep.corollary_premises += usize::from(c.premise);
                rep.violations += usize::from(c.violated());
            }
        }
        if margin_check.is_some_and(|c| c.violated()) {
            rep.violations += 1;
        }
        rep.samples.push(SampleVerdict {
            subject: s.t,
            label: s.y,
            margin: m,
            delta,
            logit_drift,
            gate_term,
            classifier_term,
            feature_shift,
            applicable,
            margin_check,
            corollary,
        });
    }
    Ok(rep)
}
