use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::losses::l2_penalty;
use super::replay::stack_samples;
use super::trainer::{batches, evaluate, stratified_holdout, EpochLog};
use crate::container;
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::{GatedModel, Pass};
use crate::numerics::{Adam, AdamConfig, Real, Schedule, Tape, Tensor};
use crate::seeds::derive;

const TAG_SPLIT: u64 = 11;
const TAG_SHUFFLE: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate reached by the cosine schedule at the final epoch.
    pub lr_floor: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub clip: Option<f64>,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 300,
            lr: 1e-3,
            lr_floor: 1e-6,
            patience: 20,
            batch_size: 64,
            l2: 1e-4,
            clip: Some(1.0),
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule::Cosine {
            floor: self.lr_floor,
            epochs: self.epochs,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BestMark {
    acc: f64,
    loss: f64,
    epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct StateManifest {
    kind: String,
    config: PretrainConfig,
    epoch: usize,
    stale: usize,
    stopped: bool,
    adam_step: u64,
    best: Option<BestMark>,
    log: Vec<EpochLog>,
}

const STATE_KIND: &str = "pretrain_state";

/// Resumable supervised training of a backbone with a cosine schedule and
/// best-on-validation checkpointing.
pub struct Pretrainer<T> {
    config: PretrainConfig,
    samples: Vec<WindowSample>,
    train_idx: Vec<usize>,
    val: Vec<WindowSample>,
    model: GatedModel<T>,
    adam: Adam<T>,
    epoch: usize,
    stale: usize,
    stopped: bool,
    best: Option<(BestMark, GatedModel<T>)>,
    log: Vec<EpochLog>,
}

impl<T: Real> Pretrainer<T> {
    pub fn new(model: GatedModel<T>, samples: Vec<WindowSample>, config: PretrainConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("no pretraining windows".into()));
        }
        if config.epochs == 0 || config.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.y).collect();
        let k = model.config().num_classes;
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} outside the model's {k} classes")));
        }
        let (train_idx, val_idx) = stratified_holdout(&labels, config.val_fraction, derive(&[config.seed, TAG_SPLIT]));
        let val = val_idx.iter().map(|&i| samples[i].clone()).collect();
        let adam = Adam::new(AdamConfig {
            lr: config.lr,
            clip: config.clip,
            ..AdamConfig::default()
        });
        Ok(Pretrainer {
            config,
            samples,
            train_idx,
            val,
            model,
            adam,
            epoch: 0,
            stale: 0,
            stopped: false,
            best: None,
            log: Vec::new(),
        })
    }

    /// Index of the next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.epoch >= self.config.epochs
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn model(&self) -> &GatedModel<T> {
        &self.model
    }

    /// Weights of the best validation epoch so far (current weights before
    /// the first epoch).
    pub fn best_model(&self) -> &GatedModel<T> {
        self.best.as_ref().map_or(&self.model, |(_, m)| m)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|(b, _)| b.epoch)
    }

    pub fn step_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = self.config.schedule().lr_at(self.config.lr, epoch);
        self.adam.set_lr(lr);
        let mut order = self.train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(&[self.config.seed, TAG_SHUFFLE, epoch as u64])));
        let (mut loss_sum, mut grad_norm) = (0.0, 0.0f64);
        for batch in batches(&order, self.config.batch_size) {
            let refs: Vec<&WindowSample> = batch.iter().map(|&i| &self.samples[i]).collect();
            let ys: Vec<usize> = refs.iter().map(|s| s.y).collect();
            let mut tape = Tape::new();
            let x = tape.constant(stack_samples::<T>(&refs)?);
            let f = self.model.forward(&mut tape, x, Pass::train(None))?;
            let mut terms = vec![tape.cross_entropy(f.logits, &ys)?];
            if let Some(l2) = l2_penalty(&mut tape, self.model.params(), self.config.l2)? {
                terms.push(l2);
            }
            let loss = tape.add_scalars(&terms)?;
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("pretraining loss {lv} at epoch {epoch}")));
            }
            loss_sum += lv * batch.len() as f64;
            self.model.params_mut().zero_grad();
            tape.backward(loss, self.model.params_mut())?;
            grad_norm = grad_norm.max(self.adam.step(self.model.params_mut()));
        }
        let (val_acc, val_loss) = if self.val.is_empty() {
            (None, None)
        } else {
            let (a, l) = evaluate(&mut self.model, &self.val, None)?;
            (Some(a), Some(l))
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / self.train_idx.len() as f64,
            val_loss,
            val_acc,
            grad_norm,
        };
        let (acc, vl) = (val_acc.unwrap_or(0.0), val_loss.unwrap_or(0.0));
        let improved = match &self.best {
            None => true,
            Some((b, _)) => self.val.is_empty() || acc > b.acc,
        };
        if improved {
            self.best = Some((BestMark { acc, loss: vl, epoch }, self.model.clone()));
            self.stale = 0;
        } else {
            self.stale += 1;
            self.stopped = self.stale >= self.config.patience;
        }
        info!(
            "pretrain epoch {epoch}: lr {lr:.3e} loss {:.5} val_acc {val_acc:?}",
            entry.train_loss
        );
        self.log.push(entry.clone());
        self.epoch += 1;
        Ok(entry)
    }

    /// Run until finished, or for at most `limit` more epochs.
    pub fn run(&mut self, limit: Option<usize>) -> Result<()> {
        let mut done = 0;
        while !self.finished() && limit.is_none_or(|l| done < l) {
            self.step_epoch()?;
            done += 1;
        }
        Ok(())
    }

    /// Write `current.gclt`, `best.gclt` and `optimizer.gclt` into `dir`.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join("current.gclt"), json!({ "epoch": self.epoch }))?;
        let meta = match &self.best {
            Some((b, _)) => json!({ "epoch": b.epoch, "val_acc": b.acc, "val_loss": b.loss }),
            None => serde_json::Value::Null,
        };
        self.best_model().save(&dir.join("best.gclt"), meta)?;
        let manifest = StateManifest {
            kind: STATE_KIND.into(),
            config: self.config.clone(),
            epoch: self.epoch,
            stale: self.stale,
            stopped: self.stopped,
            adam_step: self.adam.step,
            best: self.best.as_ref().map(|(b, _)| b.clone()),
            log: self.log.clone(),
        };
        let moments = self.adam.moments();
        let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
        for (i, m, v) in &moments {
            tensors.push((format!("m.{i}"), *m));
            tensors.push((format!("v.{i}"), *v));
        }
        container::write(&dir.join("optimizer.gclt"), &serde_json::to_value(&manifest)?, &tensors)
    }

    /// Continue a run saved by [`Pretrainer::save_state`] on the same windows.
    pub fn resume(dir: &Path, samples: Vec<WindowSample>) -> Result<Self> {
        let opt_path = dir.join("optimizer.gclt");
        let (manifest, tensors) = container::read::<T>(&opt_path)?;
        let bad = |reason: String| Error::Container {
            path: Some(opt_path.clone()),
            reason,
        };
        let state: StateManifest = serde_json::from_value(manifest)?;
        if state.kind != STATE_KIND {
            return Err(bad(format!("expected kind {STATE_KIND:?}, found {:?}", state.kind)));
        }
        let (model, _) = GatedModel::<T>::load(&dir.join("current.gclt"))?;
        let mut p = Pretrainer::new(model, samples, state.config)?;
        p.epoch = state.epoch;
        p.stale = state.stale;
        p.stopped = state.stopped;
        p.adam.step = state.adam_step;
        p.log = state.log;
        let mut pending: Option<(usize, Tensor<T>)> = None;
        for (name, t) in tensors {
            let (kind, idx) = name
                .split_once('.')
                .and_then(|(k, i)| Some((k.to_string(), i.parse::<usize>().ok()?)))
                .ok_or_else(|| bad(format!("unexpected tensor {name:?}")))?;
            match (kind.as_str(), pending.take()) {
                ("m", None) => pending = Some((idx, t)),
                ("v", Some((mi, m))) if mi == idx => p.adam.restore_moments(idx, m, t),
                _ => return Err(bad(format!("moment tensors out of order at {name:?}"))),
            }
        }
        if pending.is_some() {
            return Err(bad("first moment without a second".into()));
        }
        if let Some(b) = state.best {
            let (best, _) = GatedModel::<T>::load(&dir.join("best.gclt"))?;
            p.best = Some((b, best));
        }
        Ok(p)
    }
}
