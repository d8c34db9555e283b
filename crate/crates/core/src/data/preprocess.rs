//! Windowing, per-subject standardization and length resampling.

use serde::{Deserialize, Serialize};

use super::{DataWarning, RawRecording};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Start offsets of half-overlapping windows. A trailing remainder shorter
/// than `window_len` is dropped.
pub fn window_offsets(len: usize, window_len: usize) -> Result<Vec<usize>> {
    if window_len == 0 {
        return Err(Error::invalid("window length must be positive"));
    }
    if len < window_len {
        return Ok(Vec::new());
    }
    let step = (window_len / 2).max(1);
    Ok((0..=(len - window_len) / step).map(|i| i * step).collect())
}

/// Cut a `[channels, len]` signal into `[channels, window_len]` segments.
pub fn window(signal: &Tensor<f64>, window_len: usize) -> Result<Vec<Tensor<f64>>> {
    if signal.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: signal.shape().to_vec(),
            reason: "signal must be [channels, length]".into(),
        });
    }
    let (c, len) = (signal.dim(0), signal.dim(1));
    window_offsets(len, window_len)?
        .into_iter()
        .map(|off| {
            let mut data = Vec::with_capacity(c * window_len);
            for ch in 0..c {
                data.extend_from_slice(&signal.data()[ch * len + off..][..window_len]);
            }
            Tensor::new(&[c, window_len], data)
        })
        .collect()
}

/// Standardize every channel over the concatenation of one subject's
/// recordings, using the population standard deviation. Constant channels
/// become zeros and produce a warning.
pub fn zscore_per_subject(recordings: &[RawRecording]) -> Result<(Vec<RawRecording>, Vec<DataWarning>)> {
    let Some(first) = recordings.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let c = first.channels();
    if let Some(r) = recordings.iter().find(|r| r.subject != first.subject || r.channels() != c) {
        return Err(Error::Data(format!(
            "z-scoring mixes subject {} ({} channels) with subject {} ({} channels)",
            first.subject,
            c,
            r.subject,
            r.channels()
        )));
    }
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for r in recordings {
        let len = r.len();
        for (ch, s) in sum.iter_mut().enumerate() {
            *s += r.samples.data()[ch * len..(ch + 1) * len].iter().sum::<f64>();
        }
        count += len;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; c];
    for r in recordings {
        let len = r.len();
        for (ch, q) in sq.iter_mut().enumerate() {
            *q += r.samples.data()[ch * len..(ch + 1) * len]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    let std: Vec<f64> = sq.iter().map(|q| (q / count as f64).sqrt()).collect();
    let mut warnings = Vec::new();
    for (ch, &s) in std.iter().enumerate() {
        if s == 0.0 || !s.is_finite() {
            let w = DataWarning {
                subject: Some(first.subject),
                message: format!("channel {ch} has zero variance; set to zeros"),
            };
            log::warn!("subject {}: {}", first.subject, w.message);
            warnings.push(w);
        }
    }
    let out = recordings
        .iter()
        .map(|r| {
            let len = r.len();
            let mut data = r.samples.data().to_vec();
            for ch in 0..c {
                for v in &mut data[ch * len..(ch + 1) * len] {
                    *v = if std[ch] > 0.0 && std[ch].is_finite() {
                        (*v - mean[ch]) / std[ch]
                    } else {
                        0.0
                    };
                }
            }
            Ok(RawRecording {
                samples: Tensor::new(r.samples.shape(), data)?,
                ..r.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, warnings))
}

/// Per-channel linear interpolation onto `target` evenly spaced points that
/// span the same index range, so both endpoints are kept exactly.
pub fn resize_linear(x: &Tensor<f64>, target: usize) -> Result<Tensor<f64>> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [channels, length]".into(),
        });
    }
    let (c, d) = (x.dim(0), x.dim(1));
    if d < 2 || target < 2 {
        return Err(Error::invalid(format!("cannot resize length {d} to {target}; both must be at least 2")));
    }
    if d == target {
        return Ok(x.clone());
    }
    let scale = (d - 1) as f64 / (target - 1) as f64;
    let mut out = Vec::with_capacity(c * target);
    for ch in 0..c {
        let row = &x.data()[ch * d..(ch + 1) * d];
        for j in 0..target {
            if j == target - 1 {
                out.push(row[d - 1]);
                continue;
            }
            let pos = j as f64 * scale;
            let i = (pos.floor() as usize).min(d - 2);
            let frac = pos - i as f64;
            out.push(row[i] + (row[i + 1] - row[i]) * frac);
        }
    }
    Tensor::new(&[c, target], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Per-subject channel standardization before windowing.
    pub zscore: bool,
    /// Window length in raw samples; `None` uses the dataset's own.
    pub window_len: Option<usize>,
    /// Length every window is resampled to.
    pub target_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            zscore: true,
            window_len: None,
            target_len: 200,
        }
    }
}
