//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every forward call appends one node holding its output value and whatever
//! it needs for the backward pass. [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients into the trainable entries of a
//! [`ParamStore`]. Nodes that cannot reach a trainable parameter are skipped.

use rand::Rng;

use super::ops::{self, BnCache, BnStats};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Const,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MeanPool(Var),
    ChannelScale {
        u: Var,
        g: Var,
    },
    Add(Var, Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    SoftKl {
        logits: Var,
        target: Tensor<T>,
        student: Tensor<T>,
        temperature: T,
    },
    Mse {
        x: Var,
        target: Tensor<T>,
    },
    SumSquares(Var),
    Scale(Var, T),
    Sum(Var),
    AddScalars(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Const => false,
            Op::Param(_) => unreachable!("params are pushed via Tape::param"),
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Const, &[])
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv1d_batch(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        train: bool,
    ) -> Result<Var> {
        let (out, cache) =
            ops::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), stats, train)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::MeanPool(x), &[x]))
    }

    pub fn channel_scale(&mut self, u: Var, g: Var) -> Result<Var> {
        let out = ops::channel_scale(self.value(u), self.value(g))?;
        Ok(self.push(out, Op::ChannelScale { u, g }, &[u, g]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(src.shape(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let loss = ops::cross_entropy(lv, labels)?;
        let probs = ops::softmax_rows(lv, T::one());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `T^2 * KL(target || softmax(logits / T))`, averaged over the batch.
    ///
    /// `target` holds probabilities (rows summing to one) and is a constant.
    pub fn soft_kl(&mut self, logits: Var, target: &Tensor<T>, temperature: T) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "soft_kl",
                dim: "target",
                expected: lv.len(),
                got: target.len(),
            });
        }
        let (b, _) = ops::rows_cols(lv)?;
        let log_q = ops::log_softmax_rows(lv, temperature);
        let student = ops::softmax_rows(lv, temperature);
        let mut kl = T::zero();
        for (&p, &lq) in target.data().iter().zip(log_q.data()) {
            if p > T::zero() {
                kl = kl + p * (p.ln() - lq);
            }
        }
        let loss = temperature * temperature * kl / T::lit(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftKl {
                logits,
                target: target.clone(),
                student,
                temperature,
            },
            &[logits],
        ))
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                dim: "target",
                expected: xv.len(),
                got: target.len(),
            });
        }
        let n = T::lit(xv.len() as f64);
        let loss = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                x,
                target: target.clone(),
            },
            &[x],
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_squares();
        self.push(Tensor::scalar(v), Op::SumSquares(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::invalid("add_scalars needs at least one term"));
        }
        let mut s = T::zero();
        for &t in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::NotScalar(v.shape().to_vec()));
            }
            s = s + v.item();
        }
        Ok(self.push(Tensor::scalar(s), Op::AddScalars(terms.to_vec()), terms))
    }

    /// Accumulate `d loss / d param` into every trainable parameter's gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one())?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.trainable {
                        if p.grad.shape() != g.shape() {
                            return Err(Error::InvalidShape {
                                shape: g.shape().to_vec(),
                                reason: format!("gradient for {}", p.name),
                            });
                        }
                        for (pg, x) in p.grad.data_mut().iter_mut().zip(g.data()) {
                            *pg = *pg + *x;
                        }
                    }
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let cg = ops::conv1d_backward(
                        self.value(*x),
                        self.value(*w),
                        *stride,
                        *padding,
                        &g,
                        needs(*x),
                        needs(*w),
                        b.is_some_and(needs),
                    )?;
                    if let Some(dx) = cg.input {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = cg.weight {
                        acc(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.bias) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batchnorm_backward(&g, self.value(*gamma), cache)?;
                    if needs(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if needs(*gamma) {
                        acc(&mut grads, *gamma, dg);
                    }
                    if needs(*beta) {
                        acc(&mut grads, *beta, db);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = xv.zip_map(&g, |v, gv| if v > T::zero() { gv } else { T::zero() })?;
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.zip_map(&g, |s, gv| gv * s * (T::one() - s))?;
                    acc(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (out, inp) = (wv.dim(0), wv.dim(1));
                    let batch = xv.len() / inp;
                    if needs(*x) {
                        let mut dx = vec![T::zero(); xv.len()];
                        T::gemm(batch, out, inp, T::one(), g.data(), false, wv.data(), false, T::zero(), &mut dx);
                        acc(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                    }
                    if needs(*w) {
                        let mut dw = vec![T::zero(); out * inp];
                        T::gemm(out, batch, inp, T::one(), g.data(), true, xv.data(), false, T::zero(), &mut dw);
                        acc(&mut grads, *w, Tensor::new(wv.shape(), dw)?);
                    }
                    if let Some(b) = b.filter(|b| needs(*b)) {
                        let mut db = vec![T::zero(); out];
                        for row in g.data().chunks(out) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        acc(&mut grads, b, Tensor::new(&[out], db)?);
                    }
                }
                Op::MeanPool(x) => {
                    let xv = self.value(*x);
                    let l = *xv.shape().last().expect("rank >= 2");
                    let inv = T::one() / T::lit(l as f64);
                    let mut dx = Vec::with_capacity(xv.len());
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat_n(gv * inv, l));
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::ChannelScale { u, g: gate } => {
                    let uv = self.value(*u);
                    let gv = self.value(*gate);
                    let l = *uv.shape().last().expect("rank >= 2");
                    if needs(*u) {
                        acc(&mut grads, *u, ops::channel_scale(&g, gv)?);
                    }
                    if needs(*gate) {
                        let dg: Vec<T> = g
                            .data()
                            .chunks(l)
                            .zip(uv.data().chunks(l))
                            .map(|(gr, ur)| gr.iter().zip(ur).map(|(&a, &b)| a * b).sum())
                            .collect();
                        acc(&mut grads, *gate, Tensor::new(gv.shape(), dg)?);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape(), data)?);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = *probs.shape().last().expect("rank >= 1");
                    let scale = g.item() / T::lit(labels.len() as f64);
                    let mut d = probs.data().to_vec();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * k + y] = d[i * k + y] - T::one();
                    }
                    for v in &mut d {
                        *v = *v * scale;
                    }
                    acc(&mut grads, *logits, Tensor::new(probs.shape(), d)?);
                }
                Op::SoftKl {
                    logits,
                    target,
                    student,
                    temperature,
                } => {
                    let (b, _) = ops::rows_cols(student)?;
                    let scale = g.item() * *temperature / T::lit(b as f64);
                    let d = student.zip_map(target, |q, p| (q - p) * scale)?;
                    acc(&mut grads, *logits, d);
                }
                Op::Mse { x, target } => {
                    let xv = self.value(*x);
                    let scale = g.item() * T::lit(2.0) / T::lit(xv.len() as f64);
                    let d = xv.zip_map(target, |a, b| (a - b) * scale)?;
                    acc(&mut grads, *x, d);
                }
                Op::SumSquares(x) => {
                    let gv = g.item() * T::lit(2.0);
                    acc(&mut grads, *x, self.value(*x).map(|v| v * gv));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, Tensor::full(xv.shape(), g.item())?);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(&mut grads, *x, g.map(|v| v * c));
                }
                Op::AddScalars(terms) => {
                    for &t in terms {
                        if needs(t) {
                            acc(&mut grads, t, g.clone());
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.sum(w);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let frozen = store.add("a", Tensor::full(&[3], 2.0).unwrap(), false);
        let live = store.add("b", Tensor::full(&[3], 1.0).unwrap(), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, frozen);
        let b = tape.param(&store, live);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_squares(s);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(frozen).grad.data().iter().all(|&g| g == 0.0));
        assert!(store.get(live).grad.data().iter().all(|&g| g == 6.0));
    }

    #[test]
    fn backward_errors() {
        let mut store = ParamStore::<f64>::new();
        let tape = Tape::<f64>::new();
        let mut other = Tape::<f64>::new();
        let v = other.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(v, &mut store), Err(Error::EmptyTape)));

        let id = store.add("w", Tensor::full(&[3], 1.0).unwrap(), true);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let r = tape.relu(w);
        assert!(matches!(tape.backward(r, &mut store), Err(Error::NotScalar(_))));
    }
}
