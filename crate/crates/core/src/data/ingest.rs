//! Long-form CSV ingestion.
//!
//! The CSV header is `subject,activity,t0,ch_0,...,ch_{C-1}`: one row per
//! time step, `t0` the integer sample index within the subject's session.
//! Consecutive rows with the same subject and activity and `t0` advancing by
//! one form a recording. `activity` is either a label index or a label name
//! from the manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, RawRecording};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub sampling_rate: f64,
    pub window_len: usize,
    pub channels: usize,
    pub labels: Vec<String>,
    /// Free-form note on how the CSV was derived from the upstream archive.
    #[serde(default)]
    pub source: Option<String>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.channels == 0 || m.labels.len() < 2 || m.window_len < 2 || m.sampling_rate <= 0.0 {
            return Err(Error::Data(format!("{}: manifest has empty or degenerate fields", path.display())));
        }
        Ok(m)
    }
}

struct Pending {
    subject: u32,
    activity: usize,
    last_t0: i64,
    columns: Vec<Vec<f64>>,
}

impl Pending {
    fn finish(self, rate: f64) -> Result<RawRecording> {
        let len = self.columns[0].len();
        let c = self.columns.len();
        let data: Vec<f64> = self.columns.into_iter().flatten().collect();
        Ok(RawRecording {
            subject: self.subject,
            activity: self.activity,
            sampling_rate: rate,
            samples: Tensor::new_finite(&[c, len], data)?,
        })
    }
}

pub fn load_csv_dataset(csv_path: &Path, manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut reader = csv::Reader::from_reader(std::io::BufReader::new(file));
    let data_err = |line: u64, msg: String| Error::Data(format!("{}:{line}: {msg}", csv_path.display()));

    let headers = reader.headers().map_err(|e| data_err(1, e.to_string()))?.clone();
    let mut expected = vec!["subject".to_string(), "activity".into(), "t0".into()];
    expected.extend((0..manifest.channels).map(|c| format!("ch_{c}")));
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(data_err(1, format!("header {:?} does not match {:?}", got, expected)));
    }

    let mut recordings = Vec::new();
    let mut pending: Option<Pending> = None;
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| data_err(line, e.to_string()))?;
        let field = |j: usize| row.get(j).map(str::trim).unwrap_or("");
        let subject: u32 = field(0)
            .parse()
            .map_err(|_| data_err(line, format!("bad subject {:?}", field(0))))?;
        let act = field(1);
        let activity = match act.parse::<usize>() {
            Ok(k) if k < manifest.labels.len() => k,
            _ => manifest
                .labels
                .iter()
                .position(|l| l == act)
                .ok_or_else(|| data_err(line, format!("unknown activity {act:?}")))?,
        };
        let t0: i64 = field(2)
            .parse()
            .map_err(|_| data_err(line, format!("bad t0 {:?}", field(2))))?;
        let mut values = Vec::with_capacity(manifest.channels);
        for c in 0..manifest.channels {
            let v: f64 = field(3 + c)
                .parse()
                .map_err(|_| data_err(line, format!("bad value in ch_{c}: {:?}", field(3 + c))))?;
            if !v.is_finite() {
                return Err(data_err(line, format!("non-finite value in ch_{c}")));
            }
            values.push(v);
        }
        let continues = pending
            .as_ref()
            .is_some_and(|p| p.subject == subject && p.activity == activity && p.last_t0 + 1 == t0);
        if !continues {
            if let Some(p) = pending.take() {
                recordings.push(p.finish(manifest.sampling_rate)?);
            }
            pending = Some(Pending {
                subject,
                activity,
                last_t0: t0,
                columns: vec![Vec::new(); manifest.channels],
            });
        }
        let p = pending.as_mut().expect("set above");
        p.last_t0 = t0;
        for (col, v) in p.columns.iter_mut().zip(values) {
            col.push(v);
        }
    }
    if let Some(p) = pending.take() {
        recordings.push(p.finish(manifest.sampling_rate)?);
    }
    if recordings.is_empty() {
        return Err(Error::Data(format!("{}: no rows", csv_path.display())));
    }
    Ok(Dataset {
        name: manifest.name,
        channels: manifest.channels,
        labels: manifest.labels,
        sampling_rate: manifest.sampling_rate,
        window_len: manifest.window_len,
        recordings,
    })
}
