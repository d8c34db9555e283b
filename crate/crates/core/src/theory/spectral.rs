use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::ops::rows_cols;
use crate::numerics::Tensor;

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 1000;
const START_SEED: u64 = 0x5eed;

/// Largest singular value of a matrix by power iteration on the smaller Gram
/// matrix, from a fixed-seed start vector. Converged when the estimate's
/// relative change drops below `tol`.
pub fn spectral_norm_with(w: &Tensor<f64>, tol: f64, max_iter: usize) -> Result<f64> {
    let (m, n) = rows_cols(w)?;
    let a = w.data();
    if a.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    // G = A Aᵀ (m×m) or AᵀA (n×n), whichever is smaller
    let k = m.min(n);
    let mut g = vec![0.0; k * k];
    if m <= n {
        for i in 0..m {
            for j in 0..=i {
                let s: f64 = (0..n).map(|c| a[i * n + c] * a[j * n + c]).sum();
                g[i * k + j] = s;
                g[j * k + i] = s;
            }
        }
    } else {
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..m).map(|r| a[r * n + i] * a[r * n + j]).sum();
                g[i * k + j] = s;
                g[j * k + i] = s;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut lambda = 0.0f64;
    for _ in 0..max_iter {
        let mut next = vec![0.0; k];
        for (i, out) in next.iter_mut().enumerate() {
            *out = g[i * k..(i + 1) * k].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        // Rayleigh quotient of the normalized iterate
        let est: f64 = next.iter().zip(&v).map(|(x, y)| x * y).sum();
        let norm = normalize(&mut next);
        if norm == 0.0 {
            // a Gaussian start vector is almost surely not in the null space
            return Ok(0.0);
        }
        v = next;
        if est > 0.0 && (est - lambda).abs() <= tol * est {
            return Ok(est.sqrt());
        }
        lambda = est;
    }
    Err(Error::NoConvergence(max_iter))
}

pub fn spectral_norm(w: &Tensor<f64>) -> Result<f64> {
    spectral_norm_with(w, POWER_TOL, POWER_MAX_ITER)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}
