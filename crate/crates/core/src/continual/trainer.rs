use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use super::losses::{kd_loss, l2_penalty};
use super::metrics::{compute_metrics, AccuracyMatrix, MetricsRecord};
use super::replay::{replay_losses, stack_samples, BufferEntry, ReplayBuffer};
use crate::data::{Task, TaskStream, WindowSample};
use crate::error::{Error, Result};
use crate::model::{GateMode, GatedModel, ModelConfig, Pass};
use crate::numerics::ops::cross_entropy;
use crate::numerics::{Adam, AdamConfig, Real, Tape, Tensor};
use crate::seeds::derive;

const EVAL_CHUNK: usize = 256;

// stream tags for derived seeds
const TAG_INIT: u64 = 1;
const TAG_VAL: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_REPLAY: u64 = 4;
const TAG_BUFFER: u64 = 5;
const TAG_DROPOUT: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the full objective over the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub subject: u32,
    pub train_windows: usize,
    pub val_windows: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub epochs: Vec<EpochLog>,
}

/// Everything a task may use besides its own data.
pub struct TaskContext<'a, T> {
    /// Snapshot taken before the task, for distillation.
    pub previous: Option<&'a mut GatedModel<T>>,
    pub buffer: Option<&'a mut ReplayBuffer>,
}

impl<T> Default for TaskContext<'_, T> {
    fn default() -> Self {
        TaskContext {
            previous: None,
            buffer: None,
        }
    }
}

/// Subject id handed to the model: only task-aware gates see task identity.
fn routed_subject<T: Real>(model: &GatedModel<T>, subject: u32) -> Option<u32> {
    match model.config().mode {
        GateMode::TaskAware { .. } => Some(subject),
        GateMode::TaskFree => None,
    }
}

/// Build the model for `config.variant` on top of an optional pretrained
/// backbone. Frozen variants freeze every backbone parameter.
pub fn build_model<T: Real>(
    base: &ModelConfig,
    pretrained: Option<&GatedModel<T>>,
    config: &TrainConfig,
) -> Result<GatedModel<T>> {
    let mc = config.variant.model_config(base, config.gate_init);
    let mut model = GatedModel::new(mc, derive(&[config.seed, TAG_INIT]))?;
    if let Some(src) = pretrained {
        model.load_backbone_from(src)?;
    }
    if config.variant.frozen_backbone() {
        model.freeze_backbone();
    }
    model.reseed_dropout(derive(&[config.seed, TAG_DROPOUT]));
    Ok(model)
}

/// Stratified hold-out: about `fraction` of each class, never a class's last
/// window. Returns (train, val) positions into `labels`.
pub fn stratified_holdout(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).min(n - 1)
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Split a shuffled index list into batches; a trailing single-sample batch
/// is folded into its predecessor so batch statistics stay defined.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

/// Accuracy and mean cross-entropy of `model` on `samples` in evaluation mode.
pub fn evaluate<T: Real>(model: &mut GatedModel<T>, samples: &[WindowSample], subject: Option<u32>) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation on an empty set".into()));
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let x = stack_samples::<T>(&refs)?;
        let logits = model.predict(&x, subject)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.y).collect();
        let k = logits.dim(1);
        for (row, &y) in logits.data().chunks(k).zip(&labels) {
            let pred = Tensor::new(&[k], row.to_vec())?.argmax();
            correct += usize::from(pred == y);
        }
        loss += cross_entropy(&logits, &labels)?.as_f64() * chunk.len() as f64;
    }
    let n = samples.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Train on one task's windows with early stopping on a stratified hold-out,
/// restoring the best epoch's weights.
pub fn train_task<T: Real>(
    model: &mut GatedModel<T>,
    task: &Task,
    task_index: usize,
    config: &TrainConfig,
    mut ctx: TaskContext<'_, T>,
) -> Result<TaskLog> {
    config.validate()?;
    if task.train.is_empty() {
        return Err(Error::Data(format!("subject {} has no training windows", task.subject)));
    }
    if model.config().mode != GateMode::TaskFree {
        model.clone_gates_for_task(task.subject)?;
    }
    let subject = routed_subject(model, task.subject);
    let variant = config.variant;
    let labels = task.train.labels();
    let (train_idx, val_idx) = stratified_holdout(&labels, config.val_fraction, derive(&[config.seed, TAG_VAL, task_index as u64]));
    let val: Vec<WindowSample> = val_idx.iter().map(|&i| task.train.get(i).clone()).collect();

    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        clip: config.clip,
        ..AdamConfig::default()
    });
    let mut log = TaskLog {
        task: task_index,
        subject: task.subject,
        train_windows: train_idx.len(),
        val_windows: val.len(),
        best_epoch: 0,
        stopped_early: false,
        epochs: Vec::new(),
    };
    let mut best: Option<(f64, GatedModel<T>)> = None;
    let mut stale = 0usize;

    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(&[
            config.seed,
            TAG_SHUFFLE,
            task_index as u64,
            epoch as u64,
        ])));
        let mut replay_rng = ChaCha8Rng::seed_from_u64(derive(&[config.seed, TAG_REPLAY, task_index as u64, epoch as u64]));
        let (mut loss_sum, mut grad_norm) = (0.0, 0.0f64);
        for batch in batches(&order, config.batch_size) {
            let samples: Vec<&WindowSample> = batch.iter().map(|&i| task.train.get(i)).collect();
            let ys: Vec<usize> = samples.iter().map(|s| s.y).collect();
            let xt = stack_samples::<T>(&samples)?;
            let prev_logits = match ctx.previous.as_deref_mut() {
                Some(prev) if variant.uses_kd() => Some(prev.predict(&xt, subject)?),
                _ => None,
            };
            let mut tape = Tape::new();
            let x = tape.constant(xt);
            let f = model.forward(&mut tape, x, Pass::train(subject))?;
            let mut terms = vec![if variant.uses_kd() {
                kd_loss(&mut tape, f.logits, prev_logits.as_ref(), &ys, config.kd_alpha, config.kd_temperature)?
            } else {
                tape.cross_entropy(f.logits, &ys)?
            }];
            if let Some(buffer) = ctx.buffer.as_deref() {
                if let Some(r) = replay_losses(
                    &mut tape,
                    model,
                    buffer,
                    variant,
                    config.replay_batch,
                    config.der_alpha,
                    config.der_beta,
                    &mut replay_rng,
                )? {
                    terms.push(r);
                }
            }
            if let Some(l2) = l2_penalty(&mut tape, model.params(), config.l2)? {
                terms.push(l2);
            }
            let loss = tape.add_scalars(&terms)?;
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {lv} on subject {} (task {task_index}), epoch {epoch}",
                    task.subject
                )));
            }
            loss_sum += lv * batch.len() as f64;
            if epoch == 0 && variant.uses_replay() {
                if let Some(buffer) = ctx.buffer.as_deref_mut() {
                    let logits = tape.value(f.logits);
                    let k = logits.dim(1);
                    for (s, row) in samples.iter().zip(logits.data().chunks(k)) {
                        buffer.offer(BufferEntry {
                            sample: (*s).clone(),
                            subject: task.subject,
                            logits: Some(row.iter().map(|v| v.as_f64()).collect()),
                        });
                    }
                }
            }
            model.params_mut().zero_grad();
            tape.backward(loss, model.params_mut())?;
            grad_norm = grad_norm.max(adam.step(model.params_mut()));
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let (val_acc, val_loss) = if val.is_empty() {
            (None, None)
        } else {
            let (a, l) = evaluate(model, &val, subject)?;
            (Some(a), Some(l))
        };
        log.epochs.push(EpochLog {
            epoch,
            lr: config.lr,
            train_loss,
            val_loss,
            val_acc,
            grad_norm,
        });
        debug!("task {task_index} epoch {epoch}: loss {train_loss:.5} val_acc {val_acc:?}");
        let improved = match (&best, val_loss) {
            (None, _) => true,
            (Some((bl, _)), Some(vl)) => vl < *bl,
            (Some(_), None) => true,
        };
        if improved || val.is_empty() {
            best = Some((val_loss.unwrap_or(0.0), model.clone()));
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    info!(
        "subject {} trained for {} epochs (best {})",
        task.subject,
        log.epochs.len(),
        log.best_epoch
    );
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct StreamResult<T> {
    pub accuracy: AccuracyMatrix,
    pub metrics: MetricsRecord,
    pub logs: Vec<TaskLog>,
    pub model: GatedModel<T>,
    /// Training-window reads of each task after that task was finished.
    /// Nonzero means a later task touched earlier data directly.
    pub past_task_reads: u64,
}

/// Train through every task of `stream` in order, filling column `t'` of the
/// accuracy matrix after task `t'`.
pub fn run_stream<T: Real>(mut model: GatedModel<T>, stream: &TaskStream, config: &TrainConfig) -> Result<StreamResult<T>> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::Data("empty task stream".into()));
    }
    let mut buffer = config
        .variant
        .uses_replay()
        .then(|| ReplayBuffer::new(config.buffer_capacity, derive(&[config.seed, TAG_BUFFER])));
    let n = stream.len();
    let mut accuracy = AccuracyMatrix::new(n);
    let mut logs = Vec::with_capacity(n);
    let mut reads_at_close = Vec::with_capacity(n);
    for (tj, task) in stream.tasks.iter().enumerate() {
        let mut previous = (config.variant == Variant::Kd && tj > 0).then(|| model.clone());
        let ctx = TaskContext {
            previous: previous.as_mut(),
            buffer: buffer.as_mut(),
        };
        logs.push(train_task(&mut model, task, tj, config, ctx)?);
        reads_at_close.push(task.train.total_reads());
        for (ti, seen) in stream.tasks[..=tj].iter().enumerate() {
            let subject = routed_subject(&model, seen.subject);
            let (acc, _) = evaluate(&mut model, &seen.test, subject)?;
            accuracy.set(ti, tj, acc)?;
        }
    }
    let metrics = compute_metrics(&accuracy)?;
    let past_task_reads = stream
        .tasks
        .iter()
        .zip(&reads_at_close)
        .map(|(task, &closed)| task.train.total_reads() - closed)
        .sum();
    Ok(StreamResult {
        accuracy,
        metrics,
        logs,
        model,
        past_task_reads,
    })
}
