use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataWarning, WindowSample};
use crate::container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Training windows of one task with a read counter per window.
///
/// Every access through [`TrainSet::get`] is counted, which lets a run prove
/// it never touched an earlier task's data. Clones start with fresh counters.
#[derive(Debug, Default)]
pub struct TrainSet {
    samples: Vec<WindowSample>,
    reads: Vec<AtomicU64>,
}

impl Clone for TrainSet {
    fn clone(&self) -> Self {
        TrainSet::new(self.samples.clone())
    }
}

impl PartialEq for TrainSet {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples
    }
}

impl TrainSet {
    pub fn new(samples: Vec<WindowSample>) -> Self {
        let reads = samples.iter().map(|_| AtomicU64::new(0)).collect();
        TrainSet { samples, reads }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &WindowSample {
        self.reads[i].fetch_add(1, Ordering::Relaxed);
        &self.samples[i]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn reads(&self, i: usize) -> u64 {
        self.reads[i].load(Ordering::Relaxed)
    }

    pub fn total_reads(&self) -> u64 {
        self.reads.iter().map(|r| r.load(Ordering::Relaxed)).sum()
    }

    /// Uncounted view, for serialization and inspection only.
    pub fn samples_uncounted(&self) -> &[WindowSample] {
        &self.samples
    }

    /// Append a window, returning its index.
    pub fn push(&mut self, sample: WindowSample) -> usize {
        self.samples.push(sample);
        self.reads.push(AtomicU64::new(0));
        self.samples.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub subject: u32,
    pub train: TrainSet,
    pub test: Vec<WindowSample>,
}

/// Subjects in training order, each with a stratified train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub seed: u64,
    pub channels: usize,
    pub length: usize,
    pub num_classes: usize,
    pub tasks: Vec<Task>,
    pub warnings: Vec<DataWarning>,
}

impl TaskStream {
    pub fn order(&self) -> Vec<u32> {
        self.tasks.iter().map(|t| t.subject).collect()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Shuffle subjects into a task order and split each subject 80/20 per class.
///
/// A class with a single window goes to the training side with a warning.
pub fn make_task_stream(samples: &[WindowSample], num_classes: usize, seed: u64) -> Result<TaskStream> {
    let first = samples.first().ok_or_else(|| Error::Data("no windows".into()))?;
    let (channels, length) = (first.x.dim(0), first.x.dim(1));
    let mut by_subject: BTreeMap<u32, Vec<&WindowSample>> = BTreeMap::new();
    for s in samples {
        if s.x.shape() != [channels, length] {
            return Err(Error::Data(format!(
                "subject {} window has shape {:?}, expected [{channels}, {length}]",
                s.t,
                s.x.shape()
            )));
        }
        if s.y >= num_classes {
            return Err(Error::Data(format!("label {} outside {num_classes} classes", s.y)));
        }
        by_subject.entry(s.t).or_default().push(s);
    }
    if by_subject.len() < 2 {
        return Err(Error::Data(format!("need at least 2 subjects, found {}", by_subject.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<u32> = by_subject.keys().copied().collect();
    order.shuffle(&mut rng);

    let mut warnings = Vec::new();
    let mut tasks = Vec::with_capacity(order.len());
    for &subject in &order {
        let windows = &by_subject[&subject];
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in 0..num_classes {
            let mut idx: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].y == class).collect();
            match idx.len() {
                0 => continue,
                1 => {
                    let w = DataWarning {
                        subject: Some(subject),
                        message: format!("class {class} has a single window; kept for training"),
                    };
                    log::warn!("subject {subject}: {}", w.message);
                    warnings.push(w);
                    train.push(windows[idx[0]].clone());
                }
                n => {
                    idx.shuffle(&mut rng);
                    let n_test = ((n as f64 * 0.2).round() as usize).clamp(1, n - 1);
                    for (k, &i) in idx.iter().enumerate() {
                        if k < n_test {
                            test.push(windows[i].clone());
                        } else {
                            train.push(windows[i].clone());
                        }
                    }
                }
            }
        }
        tasks.push(Task {
            subject,
            train: TrainSet::new(train),
            test,
        });
    }
    Ok(TaskStream {
        seed,
        channels,
        length,
        num_classes,
        tasks,
        warnings,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    subject: u32,
    file: String,
    train: usize,
    test: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamIndex {
    seed: u64,
    channels: usize,
    length: usize,
    num_classes: usize,
    order: Vec<u32>,
    tasks: Vec<IndexEntry>,
    warnings: Vec<DataWarning>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubjectManifest {
    subject: u32,
    train_labels: Vec<usize>,
    test_labels: Vec<usize>,
}

fn stack_windows(ws: &[WindowSample]) -> Result<Option<Tensor<f64>>> {
    if ws.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&Tensor<f64>> = ws.iter().map(|w| &w.x).collect();
    Tensor::stack(&refs).map(Some)
}

fn unstack(t: Option<&Tensor<f64>>, labels: &[usize], subject: u32) -> Result<Vec<WindowSample>> {
    let Some(t) = t else {
        return if labels.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::Data(format!("subject {subject}: labels without windows")))
        };
    };
    if t.rank() != 3 || t.dim(0) != labels.len() {
        return Err(Error::Data(format!("subject {subject}: window block does not match labels")));
    }
    let shape = [t.dim(1), t.dim(2)];
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            Ok(WindowSample {
                x: Tensor::new(&shape, t.slice0(i).to_vec())?,
                y,
                t: subject,
            })
        })
        .collect()
}

impl TaskStream {
    /// Write `index.json` plus one tensor container per subject into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for task in &self.tasks {
            let file = format!("subject_{}.gclt", task.subject);
            let train = task.train.samples_uncounted();
            let manifest = SubjectManifest {
                subject: task.subject,
                train_labels: train.iter().map(|s| s.y).collect(),
                test_labels: task.test.iter().map(|s| s.y).collect(),
            };
            let train_x = stack_windows(train)?;
            let test_x = stack_windows(&task.test)?;
            let mut tensors = Vec::new();
            if let Some(t) = &train_x {
                tensors.push(("train.x".to_string(), t));
            }
            if let Some(t) = &test_x {
                tensors.push(("test.x".to_string(), t));
            }
            container::write(&dir.join(&file), &serde_json::to_value(&manifest)?, &tensors)?;
            entries.push(IndexEntry {
                subject: task.subject,
                file,
                train: train.len(),
                test: task.test.len(),
            });
        }
        let index = StreamIndex {
            seed: self.seed,
            channels: self.channels,
            length: self.length,
            num_classes: self.num_classes,
            order: self.order(),
            tasks: entries,
            warnings: self.warnings.clone(),
        };
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: StreamIndex = serde_json::from_str(&text)?;
        let mut tasks = Vec::new();
        for e in &index.tasks {
            let (m, tensors) = container::read::<f64>(&dir.join(&e.file))?;
            let m: SubjectManifest = serde_json::from_value(m)?;
            let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
            let train = unstack(find("train.x"), &m.train_labels, m.subject)?;
            let test = unstack(find("test.x"), &m.test_labels, m.subject)?;
            if m.subject != e.subject || train.len() != e.train || test.len() != e.test {
                return Err(Error::Data(format!("{}: disagrees with index.json", e.file)));
            }
            tasks.push(Task {
                subject: e.subject,
                train: TrainSet::new(train),
                test,
            });
        }
        Ok(TaskStream {
            seed: index.seed,
            channels: index.channels,
            length: index.length,
            num_classes: index.num_classes,
            tasks,
            warnings: index.warnings,
        })
    }
}
