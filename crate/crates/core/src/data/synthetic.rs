//! Synthetic multi-subject recordings with a per-subject channel-wise shift.
//!
//! Every class has a canonical multichannel signal: a shared per-channel
//! baseline plus an amplitude envelope times a sum of three sinusoids, with
//! class-specific frequencies, channel phases and channel gains. Classes come
//! in pairs that share frequencies and differ only in their gain profile, so
//! telling them apart needs the relative channel amplitudes. A subject sees
//! `scale * canonical + offset + noise` per channel. Recording phases depend
//! only on the class and recording index, so with zero noise two subjects
//! differ by exactly their scale and offset.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, RawRecording};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSubjectSpec {
    pub subject: u32,
    /// Positive per-channel gain.
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub classes: usize,
    pub channels: usize,
    pub window_len: usize,
    pub windows_per_recording: usize,
    pub recordings_per_class: usize,
    pub sampling_rate: f64,
    pub noise: f64,
    /// Per-channel gains are drawn log-uniformly from this range.
    pub scale_range: (f64, f64),
    pub offset_std: f64,
    /// Seeds subject gains, offsets and noise.
    pub seed: u64,
    /// Seeds the canonical class signals; datasets sharing it share classes.
    pub canonical_seed: u64,
    pub first_subject: u32,
    /// Explicit subjects; overrides the drawn gains, offsets and noise.
    pub subject_specs: Option<Vec<SyntheticSubjectSpec>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 8,
            classes: 6,
            channels: 9,
            window_len: 64,
            windows_per_recording: 7,
            recordings_per_class: 4,
            sampling_rate: 20.0,
            noise: 0.1,
            scale_range: (0.5, 2.0),
            offset_std: 0.0,
            seed: 0,
            canonical_seed: 0,
            first_subject: 1,
            subject_specs: None,
        }
    }
}

impl SyntheticSpec {
    /// Larger corpus for backbone pretraining: 51 subjects, 18 classes.
    pub fn pretraining_source() -> Self {
        SyntheticSpec {
            subjects: 51,
            classes: 18,
            recordings_per_class: 1,
            windows_per_recording: 5,
            first_subject: 1001,
            seed: 1,
            ..SyntheticSpec::default()
        }
    }

    pub fn recording_len(&self) -> usize {
        self.window_len * (self.windows_per_recording + 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.classes < 2 || self.channels == 0 {
            return Err(Error::invalid("synthetic spec needs subjects, at least 2 classes and channels"));
        }
        if self.window_len < 2 || self.windows_per_recording == 0 || self.recordings_per_class == 0 {
            return Err(Error::invalid("synthetic spec needs positive window and recording counts"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid(format!("scale range ({lo}, {hi}) must be positive and ordered")));
        }
        if self.noise < 0.0 || self.offset_std < 0.0 || self.sampling_rate <= 0.0 {
            return Err(Error::invalid("noise, offset spread and sampling rate must be nonnegative"));
        }
        if let Some(specs) = &self.subject_specs {
            for s in specs {
                if s.scale.len() != self.channels || s.offset.len() != self.channels {
                    return Err(Error::invalid(format!("subject {}: per-channel vectors must have {} entries", s.subject, self.channels)));
                }
                if let Some(bad) = s.scale.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::invalid(format!("subject {}: non-positive scale {bad}", s.subject)));
                }
                if s.noise < 0.0 {
                    return Err(Error::invalid(format!("subject {}: negative noise", s.subject)));
                }
            }
        }
        Ok(())
    }

    /// The subjects this spec generates, drawn or explicit.
    pub fn subject_specs(&self) -> Vec<SyntheticSubjectSpec> {
        if let Some(s) = &self.subject_specs {
            return s.clone();
        }
        let (lo, hi) = (self.scale_range.0.ln(), self.scale_range.1.ln());
        (0..self.subjects)
            .map(|i| {
                let subject = self.first_subject + i as u32;
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[self.seed, 1, subject as u64]));
                let scale = (0..self.channels)
                    .map(|_| if hi > lo { rng.random_range(lo..hi).exp() } else { lo.exp() })
                    .collect();
                let offset = (0..self.channels)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * self.offset_std
                    })
                    .collect();
                SyntheticSubjectSpec {
                    subject,
                    scale,
                    offset,
                    noise: self.noise,
                }
            })
            .collect()
    }

    fn class_profile(&self, class: usize) -> ClassProfile {
        let family = class / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[self.canonical_seed, 2, family as u64]));
        let nyquist = self.sampling_rate / 2.0;
        let freqs = [0.0; 3].map(|_| rng.random_range(0.05 * nyquist..0.4 * nyquist));
        let weights = [0.0; 3].map(|_| rng.random_range(0.5..1.0));
        let phases: Vec<[f64; 3]> = (0..self.channels)
            .map(|_| [0.0; 3].map(|_| rng.random_range(0.0..2.0 * PI)))
            .collect();
        let mut gains: Vec<f64> = (0..self.channels).map(|_| rng.random_range(0.5..1.5)).collect();
        if class % 2 == 1 {
            let half = self.channels / 2;
            for (c, g) in gains.iter_mut().enumerate() {
                *g *= if c < half { 1.8 } else { 0.55 };
            }
        }
        let env_rate = rng.random_range(0.02 * nyquist..0.06 * nyquist);
        let env_depth = rng.random_range(0.2..0.6);
        ClassProfile {
            freqs,
            weights,
            phases,
            gains,
            env_rate,
            env_depth,
        }
    }

    fn baseline(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[self.canonical_seed, 3]));
        (0..self.channels)
            .map(|_| {
                let m = rng.random_range(0.5..1.5);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect()
    }

    /// Subject-free signal `[channels, recording_len]` of one class recording.
    pub fn canonical_signal(&self, class: usize, recording: usize) -> Result<Tensor<f64>> {
        let p = self.class_profile(class);
        let base = self.baseline();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[
            self.canonical_seed,
            4,
            class as u64,
            recording as u64,
        ]));
        let shift = [0.0; 3].map(|_| rng.random_range(0.0..2.0 * PI));
        let env_phase = rng.random_range(0.0..2.0 * PI);
        let len = self.recording_len();
        let mut data = Vec::with_capacity(self.channels * len);
        for c in 0..self.channels {
            for j in 0..len {
                let tau = j as f64 / self.sampling_rate;
                let env = 1.0 + p.env_depth * (2.0 * PI * p.env_rate * tau + env_phase).sin();
                let wave: f64 = (0..3)
                    .map(|i| p.weights[i] * (2.0 * PI * p.freqs[i] * tau + shift[i] + p.phases[c][i]).sin())
                    .sum();
                data.push(base[c] + p.gains[c] * env * wave);
            }
        }
        Tensor::new(&[self.channels, len], data)
    }
}

struct ClassProfile {
    freqs: [f64; 3],
    weights: [f64; 3],
    phases: Vec<[f64; 3]>,
    gains: Vec<f64>,
    env_rate: f64,
    env_depth: f64,
}

/// Generate every subject's recordings: `scale * canonical + offset + noise`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let subjects = spec.subject_specs();
    let len = spec.recording_len();
    let canon: Vec<Vec<Tensor<f64>>> = (0..spec.classes)
        .map(|k| (0..spec.recordings_per_class).map(|r| spec.canonical_signal(k, r)).collect())
        .collect::<Result<_>>()?;
    let mut recordings = Vec::new();
    for s in &subjects {
        for (k, recs) in canon.iter().enumerate() {
            for (r, base) in recs.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(&[
                    spec.seed,
                    5,
                    s.subject as u64,
                    k as u64,
                    r as u64,
                ]));
                let mut data = base.data().to_vec();
                for c in 0..spec.channels {
                    for v in &mut data[c * len..(c + 1) * len] {
                        let z: f64 = if s.noise > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
                        *v = s.scale[c] * *v + s.offset[c] + s.noise * z;
                    }
                }
                recordings.push(RawRecording {
                    subject: s.subject,
                    activity: k,
                    sampling_rate: spec.sampling_rate,
                    samples: Tensor::new(&[spec.channels, len], data)?,
                });
            }
        }
    }
    Ok(Dataset {
        name: "synthetic".into(),
        channels: spec.channels,
        labels: (0..spec.classes).map(|k| format!("class_{k}")).collect(),
        sampling_rate: spec.sampling_rate,
        window_len: spec.window_len,
        recordings,
    })
}
