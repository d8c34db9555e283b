use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::GatedModel;
use crate::numerics::{Real, Tensor};

/// Minimum number of shared classes for a subject pair to count.
pub const MIN_SHARED_CLASSES: usize = 3;

/// Per subject, per class: mean pooled backbone feature.
pub type Centroids = BTreeMap<u32, BTreeMap<usize, Vec<f64>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub channels: usize,
    /// Row-major `C×C` average over subject pairs.
    pub values: Vec<f64>,
    pub pairs: usize,
    pub skipped_pairs: usize,
    pub mean_diagonal: f64,
    /// Signed mean of the off-diagonal entries.
    pub mean_off_diagonal: f64,
    pub mean_abs_off_diagonal: f64,
}

impl CorrelationMatrix {
    pub fn get(&self, c: usize, c2: usize) -> f64 {
        self.values[c * self.channels + c2]
    }
}

/// Pearson correlation with population moments; 0 when either side is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Class centroids of pooled backbone features (gates bypassed), per subject.
pub fn backbone_centroids<T: Real>(model: &mut GatedModel<T>, samples: &[WindowSample]) -> Result<Centroids> {
    let mut groups: BTreeMap<(u32, usize), Vec<&WindowSample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.t, s.y)).or_default().push(s);
    }
    let mut out = Centroids::new();
    for ((t, y), group) in groups {
        let xs: Vec<&Tensor<f64>> = group.iter().map(|s| &s.x).collect();
        let feats = model.backbone_features(&Tensor::stack(&xs)?.cast())?;
        let c = feats.dim(1);
        let mut mean = vec![0.0; c];
        for row in feats.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        let n = group.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        out.entry(t).or_default().insert(y, mean);
    }
    Ok(out)
}

/// Average over subject pairs of the `C×C` matrix whose `(c, c′)` entry
/// correlates channel `c` of one subject with channel `c′` of the other
/// across their shared class centroids.
pub fn cross_subject_correlation(centroids: &Centroids) -> Result<CorrelationMatrix> {
    let channels = centroids
        .values()
        .flat_map(|m| m.values())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::Data("no centroids".into()))?;
    let subjects: Vec<u32> = centroids.keys().copied().collect();
    let mut acc = vec![0.0; channels * channels];
    let (mut pairs, mut skipped) = (0usize, 0usize);
    for (i, a) in subjects.iter().enumerate() {
        for b in &subjects[i + 1..] {
            let (ca, cb) = (&centroids[a], &centroids[b]);
            let shared: Vec<usize> = ca.keys().filter(|k| cb.contains_key(k)).copied().collect();
            if shared.len() < MIN_SHARED_CLASSES {
                skipped += 1;
                continue;
            }
            // column c holds channel c across the shared classes
            let cols = |m: &BTreeMap<usize, Vec<f64>>| -> Result<Vec<Vec<f64>>> {
                let mut cols = vec![Vec::with_capacity(shared.len()); channels];
                for k in &shared {
                    let v = &m[k];
                    if v.len() != channels {
                        return Err(Error::Data(format!("centroid width {} != {channels}", v.len())));
                    }
                    for (col, x) in cols.iter_mut().zip(v) {
                        col.push(*x);
                    }
                }
                Ok(cols)
            };
            let (xa, xb) = (cols(ca)?, cols(cb)?);
            for c in 0..channels {
                for c2 in 0..channels {
                    acc[c * channels + c2] += pearson(&xa[c], &xb[c2]);
                }
            }
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Data(format!(
            "no subject pair shares at least {MIN_SHARED_CLASSES} classes"
        )));
    }
    acc.iter_mut().for_each(|v| *v /= pairs as f64);
    let diag: f64 = (0..channels).map(|c| acc[c * channels + c]).sum::<f64>() / channels as f64;
    let (mut off, mut off_abs) = (0.0, 0.0);
    for c in 0..channels {
        for c2 in 0..channels {
            if c != c2 {
                off += acc[c * channels + c2];
                off_abs += acc[c * channels + c2].abs();
            }
        }
    }
    let n_off = (channels * channels - channels).max(1) as f64;
    Ok(CorrelationMatrix {
        channels,
        values: acc,
        pairs,
        skipped_pairs: skipped,
        mean_diagonal: diag,
        mean_off_diagonal: off / n_off,
        mean_abs_off_diagonal: off_abs / n_off,
    })
}
