use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `A[t][t']`: accuracy on subject `t`'s test set after training through
/// subject `t'`. Only entries with `t <= t'` exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            rows: vec![vec![None; tasks]; tasks],
        }
    }

    /// Build from rows where row `t` lists `A[t][t..]`.
    pub fn from_triangle(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut a = AccuracyMatrix::new(n);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != n - t {
                return Err(Error::invalid(format!(
                    "row {t} has {} entries, expected {}",
                    row.len(),
                    n - t
                )));
            }
            for (k, &v) in row.iter().enumerate() {
                a.set(t, t + k, v)?;
            }
        }
        Ok(a)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, subject: usize, after: usize, acc: f64) -> Result<()> {
        let n = self.tasks();
        if subject > after || after >= n {
            return Err(Error::invalid(format!("entry ({subject}, {after}) outside the triangle of {n} tasks")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::invalid(format!("accuracy {acc} outside [0, 1]")));
        }
        self.rows[subject][after] = Some(acc);
        Ok(())
    }

    pub fn get(&self, subject: usize, after: usize) -> Option<f64> {
        self.rows.get(subject).and_then(|r| r.get(after)).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    /// Row `t` restricted to its defined span `t'..T`, i.e. the accuracy
    /// trajectory of subject `t`.
    pub fn trajectory(&self, subject: usize) -> Vec<Option<f64>> {
        self.rows[subject][subject..].to_vec()
    }

    fn require(&self, subject: usize, after: usize) -> Result<f64> {
        self.get(subject, after).ok_or(Error::MissingEntry {
            row: subject,
            col: after,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Final accuracy: mean of the last column.
    pub fa: f64,
    /// Forgetting: mean drop from each row's best to its final value.
    pub fm: f64,
    /// Learning accuracy: mean of the diagonal.
    pub la: f64,
}

pub fn compute_metrics(a: &AccuracyMatrix) -> Result<MetricsRecord> {
    let n = a.tasks();
    if n == 0 {
        return Err(Error::invalid("empty accuracy matrix"));
    }
    let last = n - 1;
    let (mut fa, mut fm, mut la) = (0.0, 0.0, 0.0);
    for t in 0..n {
        let mut best = f64::NEG_INFINITY;
        for after in t..n {
            best = best.max(a.require(t, after)?);
        }
        let fin = a.require(t, last)?;
        fa += fin;
        fm += best - fin;
        la += a.require(t, t)?;
    }
    let nf = n as f64;
    Ok(MetricsRecord {
        fa: fa / nf,
        fm: fm / nf,
        la: la / nf,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub runs: usize,
    pub fa: MeanStd,
    pub fm: MeanStd,
    pub la: MeanStd,
}

pub fn summarize(records: &[MetricsRecord]) -> MetricsSummary {
    let pick = |f: fn(&MetricsRecord) -> f64| MeanStd::of(&records.iter().map(f).collect::<Vec<_>>());
    MetricsSummary {
        runs: records.len(),
        fa: pick(|m| m.fa),
        fm: pick(|m| m.fm),
        la: pick(|m| m.la),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_hand_example() {
        let a = AccuracyMatrix::from_triangle(&[vec![0.9, 0.8], vec![0.85]]).unwrap();
        let m = compute_metrics(&a).unwrap();
        assert!((m.fa - 0.825).abs() < 1e-12);
        assert!((m.fm - 0.05).abs() < 1e-12);
        assert!((m.la - 0.875).abs() < 1e-12);
    }

    #[test]
    fn single_task() {
        let a = AccuracyMatrix::from_triangle(&[vec![0.7]]).unwrap();
        let m = compute_metrics(&a).unwrap();
        assert_eq!((m.fa, m.fm, m.la), (0.7, 0.0, 0.7));
    }

    #[test]
    fn missing_entry_is_an_error() {
        let mut a = AccuracyMatrix::new(2);
        a.set(0, 0, 0.5).unwrap();
        a.set(1, 1, 0.5).unwrap();
        assert!(matches!(compute_metrics(&a), Err(Error::MissingEntry { row: 0, col: 1 })));
        assert!(a.set(1, 0, 0.5).is_err());
        assert!(a.set(0, 1, 1.5).is_err());
    }

    #[test]
    fn sample_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
