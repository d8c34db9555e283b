use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Real, Tensor};

/// Per-epoch learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine from the initial rate at epoch 0 down to `floor` at epoch `epochs - 1`.
    Cosine { floor: f64, epochs: usize },
}

impl Schedule {
    pub fn lr_at(&self, initial: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => initial,
            Schedule::Cosine { floor, epochs } => {
                if epochs <= 1 {
                    return floor;
                }
                let e = epoch.min(epochs - 1) as f64;
                let frac = e / (epochs - 1) as f64;
                let lr = floor + (initial - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                // exact endpoint regardless of cos rounding
                if epoch + 1 >= epochs {
                    floor
                } else {
                    lr.clamp(floor.min(initial), initial.max(floor))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay applied directly to values. The training loss
    /// already carries an explicit L2 term, so this is normally 0.
    pub weight_decay: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: Some(1.0),
        }
    }
}

/// Adam moment buffers keyed by parameter position.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

/// Scale all trainable gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.grad.sum_squares().as_f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = T::lit(max_norm / total);
        for p in store.iter_mut().filter(|p| p.trainable) {
            for g in p.grad.data_mut() {
                *g = *g * scale;
            }
        }
    }
    total
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Moment buffer for a parameter, if it has been updated at least once.
    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.m.get(id.0).and_then(|m| m.as_ref())
    }

    /// Moment buffers `(index, m, v)` of every parameter updated so far.
    pub fn moments(&self) -> Vec<(usize, &Tensor<T>, &Tensor<T>)> {
        self.m
            .iter()
            .zip(&self.v)
            .enumerate()
            .filter_map(|(i, (m, v))| Some((i, m.as_ref()?, v.as_ref()?)))
            .collect()
    }

    /// Reinstate saved moment buffers for parameter `index`.
    pub fn restore_moments(&mut self, index: usize, m: Tensor<T>, v: Tensor<T>) {
        if self.m.len() <= index {
            self.m.resize(index + 1, None);
            self.v.resize(index + 1, None);
        }
        self.m[index] = Some(m);
        self.v[index] = Some(v);
    }

    /// Clip, then apply one Adam update to every trainable parameter.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> f64 {
        let norm = match self.config.clip {
            Some(c) => clip_grad_norm(store, c),
            None => store
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(_, p)| p.grad.sum_squares().as_f64())
                .sum::<f64>()
                .sqrt(),
        };
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()).expect("valid"));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()).expect("valid"));
            let vals = p.value.data_mut();
            for (((w, &g), mi), vi) in vals
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                if c.weight_decay != 0.0 {
                    *w = *w * decay;
                }
                *w = *w - step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_formula() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.5), true);
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig {
            clip: None,
            ..AdamConfig::default()
        });
        adam.step(&mut store);
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1
        let mhat = 0.1 / (1.0 - 0.9);
        let vhat = 0.001 / (1.0 - 0.999f64);
        let want = 0.5 - 1e-3 * mhat / (vhat.sqrt() + 1e-8);
        assert!((store.value(id).item() - want).abs() <= 1e-12);
        assert!((0.5 - store.value(id).item() - 0.001).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap(), true);
        let before = store.value(id).clone();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store);
        assert_eq!(store.value(id), &before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn clipping_to_unit_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2]).unwrap(), true);
        let b = store.add("b", Tensor::zeros(&[1]).unwrap(), true);
        store.get_mut(a).grad = Tensor::from_f64(&[2], &[6.0, 0.0]).unwrap();
        store.get_mut(b).grad = Tensor::from_f64(&[1], &[8.0]).unwrap();
        let pre = clip_grad_norm(&mut store, 1.0);
        assert!((pre - 10.0).abs() < 1e-12);
        let post = (store.get(a).grad.sum_squares() + store.get(b).grad.sum_squares()).sqrt();
        assert!((post - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::Cosine {
            floor: 1e-6,
            epochs: 300,
        };
        assert_eq!(s.lr_at(1e-3, 0), 1e-3);
        assert!((s.lr_at(1e-3, 299) - 1e-6).abs() <= 1e-12);
        for e in 0..300 {
            let lr = s.lr_at(1e-3, e);
            assert!((1e-6..=1e-3).contains(&lr));
        }
    }
}
