use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ŷ_y − max_{k≠y} ŷ_k`.
pub fn margin(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() || logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "label {y} needs at least two logits and an index below {}",
            logits.len()
        )));
    }
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[y] - runner_up)
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginCheck {
    pub margin: f64,
    /// `‖ŷ′ − ŷ‖_∞`
    pub perturbation: f64,
    /// Perturbation strictly below half the margin.
    pub premise: bool,
    /// `argmax ŷ′ = y`.
    pub preserved: bool,
}

impl MarginCheck {
    /// Premise held but the label flipped.
    pub fn violated(&self) -> bool {
        self.premise && !self.preserved
    }
}

/// Margin stability of one sample. `None` when the original prediction has
/// no positive margin (such samples are skipped and counted by callers).
pub fn check_margin_stability(logits: &[f64], perturbed: &[f64], y: usize) -> Result<Option<MarginCheck>> {
    if logits.len() != perturbed.len() {
        return Err(Error::ShapeMismatch {
            op: "check_margin_stability",
            dim: "classes",
            expected: logits.len(),
            got: perturbed.len(),
        });
    }
    let m = margin(logits, y)?;
    if m <= 0.0 {
        return Ok(None);
    }
    let perturbation = logits
        .iter()
        .zip(perturbed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Some(MarginCheck {
        margin: m,
        perturbation,
        premise: perturbation < m / 2.0,
        preserved: argmax(perturbed) == y && margin(perturbed, y)? > 0.0,
    }))
}

/// The composite drift condition that guarantees a preserved prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryCheck {
    pub margin: f64,
    /// Gate term plus classifier term of the logit-drift bound.
    pub bound: f64,
    pub premise: bool,
    pub preserved: bool,
}

impl CorollaryCheck {
    pub fn new(margin: f64, bound: f64, preserved: bool) -> Self {
        CorollaryCheck {
            margin,
            bound,
            premise: margin > 0.0 && bound < margin / 2.0,
            preserved,
        }
    }

    pub fn violated(&self) -> bool {
        self.premise && !self.preserved
    }
}
