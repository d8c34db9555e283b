use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Variant;
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::{GatedModel, Pass};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub sample: WindowSample,
    pub subject: u32,
    /// Logits the model produced when the entry was admitted.
    pub logits: Option<Vec<f64>>,
}

/// Fixed-capacity reservoir over every training window offered to it.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of items offered so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Reservoir step: the `n`-th offered item is kept with probability
    /// `capacity / n`, replacing a uniformly chosen slot. Returns whether it
    /// was kept.
    pub fn offer(&mut self, entry: BufferEntry) -> bool {
        self.seen += 1;
        if self.capacity == 0 {
            return false;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return true;
        }
        let j = self.rng.random_range(0..self.seen);
        if (j as usize) < self.capacity {
            self.entries[j as usize] = entry;
            true
        } else {
            false
        }
    }

    /// Up to `k` distinct entry indices drawn uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        let k = k.min(self.entries.len());
        index::sample(rng, self.entries.len(), k).into_vec()
    }
}

pub(crate) fn stack_samples<T: Real>(samples: &[&WindowSample]) -> Result<Tensor<T>> {
    let xs: Vec<&Tensor<f64>> = samples.iter().map(|s| &s.x).collect();
    Ok(Tensor::stack(&xs)?.cast())
}

/// Extra loss from a buffer minibatch: cross-entropy for `replay`, logit
/// matching for `der`, both for `der++`. `None` for other variants or an
/// empty buffer.
#[allow(clippy::too_many_arguments)]
pub fn replay_losses<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &mut GatedModel<T>,
    buffer: &ReplayBuffer,
    variant: Variant,
    batch: usize,
    der_alpha: f64,
    der_beta: f64,
    rng: &mut R,
) -> Result<Option<Var>> {
    if !variant.uses_replay() || buffer.is_empty() {
        return Ok(None);
    }
    let picks = buffer.sample_indices(batch, rng);
    let entries: Vec<&BufferEntry> = picks.iter().map(|&i| &buffer.entries[i]).collect();
    let samples: Vec<&WindowSample> = entries.iter().map(|e| &e.sample).collect();
    let x = tape.constant(stack_samples(&samples)?);
    // a single replayed window cannot drive batch statistics
    let train = entries.len() > 1;
    let f = model.forward(tape, x, Pass { train, ..Pass::default() })?;
    let labels: Vec<usize> = samples.iter().map(|s| s.y).collect();
    let mut terms = Vec::new();
    if matches!(variant, Variant::Replay | Variant::DerPlusPlus) {
        let ce = tape.cross_entropy(f.logits, &labels)?;
        let w = if variant == Variant::Replay { 1.0 } else { der_beta };
        terms.push(tape.scale(ce, T::lit(w)));
    }
    if matches!(variant, Variant::Der | Variant::DerPlusPlus) {
        let k = tape.value(f.logits).dim(1);
        let mut stored = Vec::with_capacity(entries.len() * k);
        for e in &entries {
            let l = e
                .logits
                .as_ref()
                .ok_or_else(|| Error::invalid("buffer entry without stored logits"))?;
            stored.extend_from_slice(l);
        }
        let target = Tensor::from_f64(&[entries.len(), k], &stored)?;
        let mse = tape.mse(f.logits, &target)?;
        terms.push(tape.scale(mse, T::lit(der_alpha)));
    }
    Ok(Some(tape.add_scalars(&terms)?))
}
