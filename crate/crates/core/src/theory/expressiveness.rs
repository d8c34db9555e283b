use serde::{Deserialize, Serialize};

use super::drift::BOUND_TOL;
use crate::error::{Error, Result};
use crate::model::apply_gate;
use crate::numerics::Tensor;

/// Margin above `‖s‖_∞` used when choosing the global scale.
pub const ALPHA_MARGIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressivenessFit {
    pub scale: Vec<f64>,
    /// `(1 + ε)·‖s‖_∞`
    pub alpha: f64,
    /// `s / α`
    pub gate: Vec<f64>,
    /// `‖D(g)U − α⁻¹U_t‖_F`
    pub residual: f64,
    /// `α⁻¹‖ε_t‖_F`
    pub bound: f64,
    /// Max abs deviation of the residual map from `−α⁻¹ε_t`.
    pub identity_error: f64,
    pub gate_in_range: bool,
    pub holds: bool,
}

/// Build the subject map `U_t = D(s)U + ε_t`, the gate `g = s/α` and check how
/// closely `D(g)U` reproduces `α⁻¹U_t`.
pub fn fit_expressiveness(u: &Tensor<f64>, scale: &[f64], residual: &Tensor<f64>) -> Result<ExpressivenessFit> {
    if u.rank() != 2 || u.dim(0) != scale.len() {
        return Err(Error::ShapeMismatch {
            op: "fit_expressiveness",
            dim: "channels",
            expected: scale.len(),
            got: if u.rank() == 2 { u.dim(0) } else { 0 },
        });
    }
    if residual.shape() != u.shape() {
        return Err(Error::InvalidShape {
            shape: residual.shape().to_vec(),
            reason: format!("residual must match {:?}", u.shape()),
        });
    }
    if let Some(bad) = scale.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("channel scale {bad} is not positive")));
    }
    let s_max = scale.iter().cloned().fold(0.0, f64::max);
    let alpha = (1.0 + ALPHA_MARGIN) * s_max;
    let gate: Vec<f64> = scale.iter().map(|s| s / alpha).collect();
    let gate_in_range = gate.iter().all(|&g| g > 0.0 && g < 1.0);
    let s = Tensor::new(&[scale.len()], scale.to_vec())?;
    let u_t = apply_gate(u, &s)?.zip_map(residual, |a, b| a + b)?;
    let h = apply_gate(u, &Tensor::new(&[gate.len()], gate.clone())?)?;
    let diff = h.zip_map(&u_t, |a, b| a - b / alpha)?;
    let identity_error = diff
        .data()
        .iter()
        .zip(residual.data())
        .map(|(r, e)| (r + e / alpha).abs())
        .fold(0.0, f64::max);
    let res = diff.norm_fro();
    let bound = residual.norm_fro() / alpha;
    Ok(ExpressivenessFit {
        scale: scale.to_vec(),
        alpha,
        gate,
        residual: res,
        bound,
        identity_error,
        gate_in_range,
        holds: gate_in_range && res <= bound + BOUND_TOL,
    })
}
