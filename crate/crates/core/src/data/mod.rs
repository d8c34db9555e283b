//! Sensor recordings, preprocessing into fixed-length windows, and
//! per-subject task streams.

mod ingest;
pub mod preprocess;
mod stream;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use ingest::{load_csv_dataset, DatasetManifest};
pub use preprocess::{resize_linear, window, window_offsets, zscore_per_subject, PreprocessConfig};
pub use stream::{make_task_stream, Task, TaskStream, TrainSet};
pub use synthetic::{generate_synthetic, SyntheticSpec, SyntheticSubjectSpec};

/// One continuous single-activity recording, `[channels, length]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub subject: u32,
    pub activity: usize,
    pub sampling_rate: f64,
    pub samples: Tensor<f64>,
}

impl RawRecording {
    pub fn channels(&self) -> usize {
        self.samples.dim(0)
    }

    pub fn len(&self) -> usize {
        self.samples.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub labels: Vec<String>,
    pub sampling_rate: f64,
    pub window_len: usize,
    pub recordings: Vec<RawRecording>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.recordings.iter().map(|r| r.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// A preprocessed window: `x` is `[channels, length]`, `y` the class, `t` the subject.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub x: Tensor<f64>,
    pub y: usize,
    pub t: u32,
}

/// Non-fatal data issue surfaced during preprocessing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataWarning {
    pub subject: Option<u32>,
    pub message: String,
}

/// Standardize (optionally), window and resample every recording.
pub fn preprocess(dataset: &Dataset, config: &PreprocessConfig) -> Result<(Vec<WindowSample>, Vec<DataWarning>)> {
    let window_len = config.window_len.unwrap_or(dataset.window_len);
    let mut by_subject: BTreeMap<u32, Vec<RawRecording>> = BTreeMap::new();
    for r in &dataset.recordings {
        if r.channels() != dataset.channels {
            return Err(Error::Data(format!(
                "subject {} recording has {} channels, dataset declares {}",
                r.subject,
                r.channels(),
                dataset.channels
            )));
        }
        if r.activity >= dataset.num_classes() {
            return Err(Error::Data(format!("activity {} outside the label set", r.activity)));
        }
        by_subject.entry(r.subject).or_default().push(r.clone());
    }
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (subject, recs) in by_subject {
        let recs = if config.zscore {
            let (z, w) = zscore_per_subject(&recs)?;
            warnings.extend(w);
            z
        } else {
            recs
        };
        for r in recs {
            if r.len() < window_len {
                warnings.push(DataWarning {
                    subject: Some(subject),
                    message: format!("recording of {} samples is shorter than one window; skipped", r.len()),
                });
                continue;
            }
            for w in window(&r.samples, window_len)? {
                samples.push(WindowSample {
                    x: resize_linear(&w, config.target_len)?,
                    y: r.activity,
                    t: subject,
                });
            }
        }
    }
    Ok((samples, warnings))
}
