//! Forward and backward kernels on raw tensors.
//!
//! Batched activations are laid out `[batch, channels, time]`. Every kernel
//! here is pure; the tape in [`super::autograd`] strings them together.

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv1d stride must be positive"));
    }
    if len + 2 * padding < kernel {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            dim: "padded input length",
            expected: kernel,
            got: len + 2 * padding,
        });
    }
    Ok((len + 2 * padding - kernel) / stride + 1)
}

/// Geometry of a batched 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: input.shape().to_vec(),
                reason: "conv1d input must be [batch, channels, length]".into(),
            });
        }
        if weight.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "conv1d weight must be [out, in, kernel]".into(),
            });
        }
        let (batch, c_in, len_in) = (input.dim(0), input.dim(1), input.dim(2));
        let (c_out, w_in, kernel) = (weight.dim(0), weight.dim(1), weight.dim(2));
        if w_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                dim: "input channels",
                expected: w_in,
                got: c_in,
            });
        }
        if let Some(b) = bias {
            if b.len() != c_out {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    dim: "bias length",
                    expected: c_out,
                    got: b.len(),
                });
            }
        }
        let len_out = conv_out_len(len_in, kernel, stride, padding)?;
        Ok(ConvGeom {
            batch,
            c_in,
            c_out,
            kernel,
            len_in,
            len_out,
            stride,
            padding,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn cols(&self) -> usize {
        self.batch * self.len_out
    }
}

/// Unfold the batch into a `[c_in * kernel, batch * len_out]` matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let n = g.cols();
    let mut cols = vec![T::zero(); g.c_in * g.kernel * n];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            let xrow = &x[(b * g.c_in + ci) * g.len_in..(b * g.c_in + ci + 1) * g.len_in];
            for k in 0..g.kernel {
                let row = &mut cols[(ci * g.kernel + k) * n + b * g.len_out..][..g.len_out];
                for (o, slot) in row.iter_mut().enumerate() {
                    let pos = (o * g.stride + k) as isize - g.padding as isize;
                    if pos >= 0 && (pos as usize) < g.len_in {
                        *slot = xrow[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let n = g.cols();
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            let xrow = &mut dx[(b * g.c_in + ci) * g.len_in..(b * g.c_in + ci + 1) * g.len_in];
            for k in 0..g.kernel {
                let row = &cols[(ci * g.kernel + k) * n + b * g.len_out..][..g.len_out];
                for (o, &v) in row.iter().enumerate() {
                    let pos = (o * g.stride + k) as isize - g.padding as isize;
                    if pos >= 0 && (pos as usize) < g.len_in {
                        xrow[pos as usize] = xrow[pos as usize] + v;
                    }
                }
            }
        }
    }
}

/// `[batch, c, len]` to channel-major `[c, batch * len]`.
fn to_channel_major<T: Real>(x: &[T], batch: usize, c: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            out[ch * batch * len + b * len..][..len]
                .copy_from_slice(&x[(b * c + ch) * len..][..len]);
        }
    }
    out
}

fn from_channel_major<T: Real>(m: &[T], batch: usize, c: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for b in 0..batch {
        for ch in 0..c {
            out[(b * c + ch) * len..][..len].copy_from_slice(&m[ch * batch * len + b * len..][..len]);
        }
    }
    out
}

pub fn conv1d_batch<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, bias, stride, padding)?;
    let n = g.cols();
    let ck = g.c_in * g.kernel;
    let cols = if g.is_pointwise() {
        to_channel_major(input.data(), g.batch, g.c_in, g.len_in)
    } else {
        im2col(&g, input.data())
    };
    let mut out_m = vec![T::zero(); g.c_out * n];
    T::gemm(g.c_out, ck, n, T::one(), weight.data(), false, &cols, false, T::zero(), &mut out_m);
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate() {
            for v in &mut out_m[co * n..(co + 1) * n] {
                *v = *v + bv;
            }
        }
    }
    Tensor::new(
        &[g.batch, g.c_out, g.len_out],
        from_channel_major(&out_m, g.batch, g.c_out, g.len_out),
    )
}

/// Gradients of a batched convolution. Only the requested pieces are computed.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, weight, None, stride, padding)?;
    let n = g.cols();
    let ck = g.c_in * g.kernel;
    let dout = to_channel_major(grad_out.data(), g.batch, g.c_out, g.len_out);

    let weight_grad = if need_weight {
        let cols = if g.is_pointwise() {
            to_channel_major(input.data(), g.batch, g.c_in, g.len_in)
        } else {
            im2col(&g, input.data())
        };
        let mut dw = vec![T::zero(); g.c_out * ck];
        T::gemm(g.c_out, n, ck, T::one(), &dout, false, &cols, true, T::zero(), &mut dw);
        Some(Tensor::new(weight.shape(), dw)?)
    } else {
        None
    };

    let bias_grad = if need_bias {
        let db = (0..g.c_out)
            .map(|co| dout[co * n..(co + 1) * n].iter().copied().sum())
            .collect();
        Some(Tensor::new(&[g.c_out], db)?)
    } else {
        None
    };

    let input_grad = if need_input {
        let mut dcols = vec![T::zero(); ck * n];
        T::gemm(ck, g.c_out, n, T::one(), weight.data(), true, &dout, false, T::zero(), &mut dcols);
        let dx = if g.is_pointwise() {
            from_channel_major(&dcols, g.batch, g.c_in, g.len_in)
        } else {
            let mut dx = vec![T::zero(); input.len()];
            col2im(&g, &dcols, &mut dx);
            dx
        };
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    })
}

/// Single-sample convolution: `[c_in, len]` in, `[c_out, len_out]` out.
pub fn conv1d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: input.shape().to_vec(),
            reason: "expected [channels, length]".into(),
        });
    }
    let batched = input.clone().reshape(&[1, input.dim(0), input.dim(1)])?;
    let out = conv1d_batch(&batched, weight, Some(bias), stride, padding)?;
    let (c, l) = (out.dim(1), out.dim(2));
    out.reshape(&[c, l])
}

/// Batch-norm running statistics and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: Tensor::zeros(&[channels]).expect("positive channels"),
            running_var: Tensor::full(&[channels], T::one()).expect("positive channels"),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Saved state needed to differentiate a batch-norm call.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

fn bn_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.rank() {
        3 => Ok((x.dim(0), x.dim(1), x.dim(2))),
        2 => Ok((x.dim(0), x.dim(1), 1)),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "batch norm expects [batch, channels(, length)]".into(),
        }),
    }
}

pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BnStats<T>,
    train: bool,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (b, c, l) = bn_dims(x)?;
    for (name, t) in [("gamma length", gamma), ("beta length", beta)] {
        if t.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                dim: name,
                expected: c,
                got: t.len(),
            });
        }
    }
    if stats.running_mean.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            dim: "running statistics",
            expected: c,
            got: stats.running_mean.len(),
        });
    }
    if train && b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let count = (b * l) as f64;
    let eps = T::lit(stats.eps);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if train {
        let mom = T::lit(stats.momentum);
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s = s + xd[(bi * c + ch) * l..][..l].iter().copied().sum::<T>();
            }
            let mu = s / T::lit(count);
            let mut sq = T::zero();
            for bi in 0..b {
                for &v in &xd[(bi * c + ch) * l..][..l] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / T::lit(count);
            let unbiased = sq / T::lit(count - 1.0);
            let rm = &mut stats.running_mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * mu;
            let rv = &mut stats.running_var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * unbiased;
        }
    } else {
        mean.copy_from_slice(stats.running_mean.data());
        var.copy_from_slice(stats.running_var.data());
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * l;
            for j in 0..l {
                let h = (xd[off + j] - mean[ch]) * inv_std[ch];
                xhat[off + j] = h;
                y[off + j] = gd[ch] * h + bd[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        BnCache {
            xhat,
            inv_std,
            train,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, l) = bn_dims(grad_out)?;
    let n = T::lit((b * l) as f64);
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * l;
            for j in 0..l {
                dgamma[ch] = dgamma[ch] + dy[off + j] * cache.xhat[off + j];
                dbeta[ch] = dbeta[ch] + dy[off + j];
            }
        }
    }
    let gd = gamma.data();
    let mut dx = vec![T::zero(); dy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * l;
            let scale = gd[ch] * cache.inv_std[ch];
            for j in 0..l {
                dx[off + j] = if cache.train {
                    scale * (dy[off + j] - dbeta[ch] / n - cache.xhat[off + j] * dgamma[ch] / n)
                } else {
                    scale * dy[off + j]
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// `y = x W^T + b` for `x: [batch, in]`, `W: [out, in]`; rank-1 `x` is one sample.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if w.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: w.shape().to_vec(),
            reason: "linear weight must be [out, in]".into(),
        });
    }
    let (out, inp) = (w.dim(0), w.dim(1));
    let (batch, feat) = match x.rank() {
        1 => (1, x.dim(0)),
        2 => (x.dim(0), x.dim(1)),
        _ => {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "linear input must be [batch, features]".into(),
            })
        }
    };
    if feat != inp {
        return Err(Error::ShapeMismatch {
            op: "linear",
            dim: "input features",
            expected: inp,
            got: feat,
        });
    }
    let mut y = vec![T::zero(); batch * out];
    if let Some(b) = b {
        if b.len() != out {
            return Err(Error::ShapeMismatch {
                op: "linear",
                dim: "bias length",
                expected: out,
                got: b.len(),
            });
        }
        for row in y.chunks_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(batch, inp, out, T::one(), x.data(), false, w.data(), true, beta, &mut y);
    if x.rank() == 1 {
        Tensor::new(&[out], y)
    } else {
        Tensor::new(&[batch, out], y)
    }
}

/// Temporal mean: `[batch, c, len] -> [batch, c]` or `[c, len] -> [c]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let l = *x.shape().last().expect("rank >= 1");
    if x.rank() < 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "pooling needs a temporal axis".into(),
        });
    }
    let inv = T::one() / T::lit(l as f64);
    let data: Vec<T> = x.data().chunks(l).map(|r| r.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&x.shape()[..x.rank() - 1], data)
}

/// `H[.., c, j] = g[.., c] * U[.., c, j]`.
pub fn channel_scale<T: Real>(u: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    if u.rank() != g.rank() + 1 || u.shape()[..g.rank()] != *g.shape() {
        return Err(Error::ShapeMismatch {
            op: "channel_scale",
            dim: "channels",
            expected: u.shape()[..u.rank() - 1].iter().product(),
            got: g.len(),
        });
    }
    let l = *u.shape().last().expect("rank >= 1");
    let mut out = u.data().to_vec();
    for (row, &gv) in out.chunks_mut(l).zip(g.data()) {
        for v in row {
            *v = *v * gv;
        }
    }
    Tensor::new(u.shape(), out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Row-wise softmax of `[batch, k]` (or rank-1) logits divided by `temperature`.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>, temperature: T) -> Tensor<T> {
    let k = *logits.shape().last().expect("rank >= 1");
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b / temperature));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v / temperature - mx).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

/// Row-wise `log_softmax`.
pub fn log_softmax_rows<T: Real>(logits: &Tensor<T>, temperature: T) -> Tensor<T> {
    let k = *logits.shape().last().expect("rank >= 1");
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b / temperature));
        let s: T = row.iter().map(|&v| (v / temperature - mx).exp()).sum();
        let lse = mx + s.ln();
        for v in row.iter_mut() {
            *v = *v / temperature - lse;
        }
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

/// Mean cross-entropy of `[batch, k]` logits against class indices.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (b, k) = rows_cols(logits)?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            dim: "labels",
            expected: b,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let ls = log_softmax_rows(logits, T::one());
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -ls.data()[i * k + y])
        .sum();
    Ok(total / T::lit(b as f64))
}

/// A single non-convolutional layer with its operands, for [`layer_forward`].
pub enum LayerKind<'a, T> {
    BatchNorm1d {
        gamma: &'a Tensor<T>,
        beta: &'a Tensor<T>,
        stats: &'a mut BnStats<T>,
        train: bool,
    },
    Relu,
    Sigmoid,
    Linear {
        weight: &'a Tensor<T>,
        bias: Option<&'a Tensor<T>>,
    },
    GlobalAvgPool,
    /// Per-channel scaling by a gate vector.
    ElementwiseMul(&'a Tensor<T>),
    Add(&'a Tensor<T>),
}

pub fn layer_forward<T: Real>(kind: LayerKind<'_, T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    match kind {
        LayerKind::BatchNorm1d {
            gamma,
            beta,
            stats,
            train,
        } => batchnorm_forward(input, gamma, beta, stats, train).map(|(y, _)| y),
        LayerKind::Relu => Ok(relu(input)),
        LayerKind::Sigmoid => Ok(sigmoid(input)),
        LayerKind::Linear { weight, bias } => linear(input, weight, bias),
        LayerKind::GlobalAvgPool => global_avg_pool(input),
        LayerKind::ElementwiseMul(g) => channel_scale(input, g),
        LayerKind::Add(other) => add(input, other),
    }
}

pub(crate) fn rows_cols<T: Real>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.rank() {
        1 => Ok((1, x.dim(0))),
        2 => Ok((x.dim(0), x.dim(1))),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [batch, classes]".into(),
        }),
    }
}
