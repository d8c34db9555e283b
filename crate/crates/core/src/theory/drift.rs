use serde::{Deserialize, Serialize};

use super::spectral::spectral_norm;
use crate::error::{Error, Result};
use crate::model::apply_gate;
use crate::numerics::ops::{global_avg_pool, linear};
use crate::numerics::Tensor;

/// Absolute slack allowed on every bound comparison.
pub const BOUND_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDrift {
    /// `‖g′ − g‖_∞`
    pub delta: f64,
    /// `‖D(g′)U − D(g)U‖_F`
    pub lhs: f64,
    /// `δ·‖U‖_F`
    pub rhs: f64,
    pub holds: bool,
}

impl FeatureDrift {
    /// `lhs / rhs`, or 1 when both vanish.
    pub fn ratio(&self) -> f64 {
        if self.rhs == 0.0 {
            if self.lhs == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            self.lhs / self.rhs
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitDrift {
    pub delta: f64,
    /// Temporal length of the feature map.
    pub d: usize,
    /// `‖ŷ′ − ŷ‖₂` from the two forward passes.
    pub drift: f64,
    /// `‖W′‖₂·(δ/√d)·‖U‖_F`
    pub gate_term: f64,
    /// `‖W′ − W‖₂·‖h‖₂`
    pub classifier_term: f64,
    pub holds: bool,
    /// `‖h′ − h‖₂`
    pub pooled_drift: f64,
    /// `‖H′ − H‖_F / √d`
    pub pooled_bound: f64,
    pub pooled_holds: bool,
    /// `‖h‖₂`
    pub h_norm: f64,
}

impl LogitDrift {
    pub fn bound(&self) -> f64 {
        self.gate_term + self.classifier_term
    }
}

pub(crate) fn check_gate(g: &Tensor<f64>, what: &str) -> Result<()> {
    if let Some(bad) = g.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::InvalidArgument(format!("{what} component {bad} outside (0, 1)")));
    }
    Ok(())
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Compare the gated feature drift for `U: [C, d]` against `δ·‖U‖_F`.
pub fn check_feature_drift(u: &Tensor<f64>, g: &Tensor<f64>, g_new: &Tensor<f64>) -> Result<FeatureDrift> {
    check_gate(g, "gate")?;
    check_gate(g_new, "updated gate")?;
    if g.shape() != g_new.shape() {
        return Err(Error::ShapeMismatch {
            op: "check_feature_drift",
            dim: "gate length",
            expected: g.len(),
            got: g_new.len(),
        });
    }
    let h = apply_gate(u, g)?;
    let h_new = apply_gate(u, g_new)?;
    let delta = g
        .data()
        .iter()
        .zip(g_new.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let lhs = diff_norm(h_new.data(), h.data());
    let rhs = delta * u.norm_fro();
    Ok(FeatureDrift {
        delta,
        lhs,
        rhs,
        holds: lhs <= rhs + BOUND_TOL,
    })
}

/// Forward both (gate, classifier) pairs through pooling and a bias-free
/// linear classifier and compare the logit drift with its two-term bound.
pub fn check_logit_drift(
    u: &Tensor<f64>,
    g: &Tensor<f64>,
    g_new: &Tensor<f64>,
    w: &Tensor<f64>,
    w_new: &Tensor<f64>,
) -> Result<LogitDrift> {
    let fd = check_feature_drift(u, g, g_new)?;
    if w.shape() != w_new.shape() {
        return Err(Error::InvalidShape {
            shape: w_new.shape().to_vec(),
            reason: format!("classifier shapes differ from {:?}", w.shape()),
        });
    }
    let (c, d) = (u.dim(0), u.dim(1));
    let pool = |m: &Tensor<f64>| -> Result<Tensor<f64>> { global_avg_pool(&m.clone().reshape(&[1, c, d])?) };
    let hm = apply_gate(u, g)?;
    let hm_new = apply_gate(u, g_new)?;
    let h = pool(&hm)?;
    let h_new = pool(&hm_new)?;
    let y = linear(&h, w, None)?;
    let y_new = linear(&h_new, w_new, None)?;
    let drift = diff_norm(y_new.data(), y.data());
    let w_diff = w_new.zip_map(w, |a, b| a - b)?;
    let h_norm = h.norm_fro();
    let gate_term = spectral_norm(w_new)? * fd.delta / (d as f64).sqrt() * u.norm_fro();
    let classifier_term = spectral_norm(&w_diff)? * h_norm;
    let pooled_drift = diff_norm(h_new.data(), h.data());
    let pooled_bound = diff_norm(hm_new.data(), hm.data()) / (d as f64).sqrt();
    Ok(LogitDrift {
        delta: fd.delta,
        d,
        drift,
        gate_term,
        classifier_term,
        holds: drift <= gate_term + classifier_term + BOUND_TOL,
        pooled_drift,
        pooled_bound,
        pooled_holds: pooled_drift <= pooled_bound + BOUND_TOL,
        h_norm,
    })
}
