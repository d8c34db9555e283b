//! Stand-alone channel gate on a single `[channels, length]` feature map.

use crate::error::{Error, Result};
use crate::numerics::{ops, Real, Tensor};

/// Squeeze (temporal mean), excite (`sigmoid(W2 relu(W1 z))`), and scale.
/// Returns the gate vector and the gated map.
pub fn gate_forward<T: Real>(u: &Tensor<T>, w1: &Tensor<T>, w2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if u.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: u.shape().to_vec(),
            reason: "gate input must be [channels, length]".into(),
        });
    }
    let c = u.dim(0);
    if w1.rank() != 2 || w1.dim(1) != c {
        return Err(Error::ShapeMismatch {
            op: "gate",
            dim: "first layer input width",
            expected: c,
            got: if w1.rank() == 2 { w1.dim(1) } else { 0 },
        });
    }
    if w2.rank() != 2 || w2.dim(0) != c || w2.dim(1) != w1.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "gate",
            dim: "second layer shape",
            expected: c * w1.dim(0),
            got: w2.len(),
        });
    }
    let z = ops::global_avg_pool(u)?;
    let a = ops::relu(&ops::linear(&z, w1, None)?);
    let g = ops::sigmoid(&ops::linear(&a, w2, None)?);
    let h = ops::channel_scale(u, &g)?;
    Ok((g, h))
}

/// Apply an externally supplied gate vector.
pub fn apply_gate<T: Real>(u: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    ops::channel_scale(u, g)
}
