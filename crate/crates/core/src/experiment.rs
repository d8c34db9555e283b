//! Experiment plumbing: JSON specs, sweeps over variants and stream
//! permutations, run records and aggregated report tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continual::{
    build_model, run_stream, summarize, AccuracyMatrix, MetricsRecord, MetricsSummary, PretrainConfig, Pretrainer,
    TaskLog, TrainConfig, Variant,
};
use crate::data::{
    generate_synthetic, load_csv_dataset, make_task_stream, preprocess, DataWarning, PreprocessConfig, SyntheticSpec,
    WindowSample,
};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, GatedModel, ModelConfig};
use crate::numerics::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
    Csv {
        csv: PathBuf,
        manifest: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

impl DataSource {
    /// Synthetic recordings are already on a common scale and use short
    /// windows; real recordings are standardized per subject.
    pub fn default_preprocess(&self) -> PreprocessConfig {
        match self {
            DataSource::Synthetic { .. } => PreprocessConfig {
                zscore: false,
                window_len: None,
                target_len: 64,
            },
            DataSource::Csv { .. } => PreprocessConfig::default(),
        }
    }

    /// Make relative CSV paths relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        if let DataSource::Csv { csv, manifest } = self {
            for p in [csv, manifest] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        if let DataSource::Csv { csv, manifest } = self {
            for p in [csv, manifest] {
                if !p.exists() {
                    return Err(Error::invalid(format!("data file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Preprocessed windows of one data source.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub windows: Vec<WindowSample>,
    pub channels: usize,
    pub length: usize,
    pub num_classes: usize,
    pub warnings: Vec<DataWarning>,
}

pub fn prepare(source: &DataSource, config: Option<&PreprocessConfig>) -> Result<PreparedData> {
    let dataset = match source {
        DataSource::Synthetic { spec } => generate_synthetic(spec)?,
        DataSource::Csv { csv, manifest } => load_csv_dataset(csv, manifest)?,
    };
    let cfg = config.cloned().unwrap_or_else(|| source.default_preprocess());
    let (windows, warnings) = preprocess(&dataset, &cfg)?;
    if windows.is_empty() {
        return Err(Error::Data("preprocessing produced no windows".into()));
    }
    Ok(PreparedData {
        windows,
        channels: dataset.channels,
        length: cfg.target_len,
        num_classes: dataset.num_classes(),
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    pub data: DataSource,
    pub preprocess: Option<PreprocessConfig>,
    /// `None` uses the compact backbone for the source's channel count.
    pub backbone: Option<BackboneConfig>,
    pub train: PretrainConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            data: DataSource::Synthetic {
                spec: SyntheticSpec::pretraining_source(),
            },
            preprocess: None,
            backbone: None,
            train: PretrainConfig::default(),
        }
    }
}

impl PretrainSpec {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut spec: PretrainSpec = serde_json::from_str(text)?;
        spec.data.resolve(base_dir);
        spec.data.check_paths()?;
        Ok(spec)
    }

    /// A fresh pretrainer over this spec's data, or one resumed from `state`.
    pub fn pretrainer<T: Real>(&self, state: Option<&Path>) -> Result<Pretrainer<T>> {
        let data = prepare(&self.data, self.preprocess.as_ref())?;
        if let Some(dir) = state {
            return Pretrainer::resume(dir, data.windows);
        }
        let backbone = self.backbone.clone().unwrap_or_else(|| BackboneConfig::compact(data.channels));
        let model = GatedModel::new(
            ModelConfig::new(backbone, data.num_classes).without_gates(),
            crate::seeds::derive(&[self.train.seed, TAG_PRETRAIN_INIT]),
        )?;
        Pretrainer::new(model, data.windows, self.train.clone())
    }
}

const TAG_PRETRAIN_INIT: u64 = 21;

/// Where the frozen backbone comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSource {
    /// A saved model checkpoint.
    Checkpoint(PathBuf),
    /// Pretrain in-process before the sweep.
    Pretrain(PretrainSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub data: DataSource,
    pub preprocess: Option<PreprocessConfig>,
    /// Only used without a pretrained backbone; otherwise the backbone's own
    /// layout is kept.
    pub backbone: Option<BackboneConfig>,
    pub pretrained: Option<BackboneSource>,
    pub variants: Vec<Variant>,
    pub permutations: usize,
    /// Permutation `p` shuffles subjects and seeds training with `seed + p`.
    pub seed: u64,
    /// Shared training settings; `variant` and `seed` are set per run.
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            data: DataSource::default(),
            preprocess: None,
            backbone: None,
            pretrained: None,
            variants: vec![Variant::Base, Variant::Frozen, Variant::FrozenGates],
            permutations: 10,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentSpec {
    /// Parse a spec and resolve relative paths against `base_dir`. Call
    /// [`ExperimentSpec::validate`] after applying any overrides.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.data.resolve(base_dir);
        match &mut spec.pretrained {
            Some(BackboneSource::Checkpoint(p)) if p.is_relative() => *p = base_dir.join(&*p),
            Some(BackboneSource::Pretrain(pre)) => pre.data.resolve(base_dir),
            _ => {}
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::invalid("no variants requested"));
        }
        if self.permutations == 0 {
            return Err(Error::invalid("permutations must be at least 1"));
        }
        self.data.check_paths()?;
        match &self.pretrained {
            Some(BackboneSource::Checkpoint(p)) if !p.exists() => {
                return Err(Error::invalid(format!("checkpoint {} does not exist", p.display())))
            }
            Some(BackboneSource::Pretrain(pre)) => pre.data.check_paths()?,
            None => {
                if let Some(v) = self.variants.iter().find(|v| v.frozen_backbone()) {
                    return Err(Error::invalid(format!("variant {v} freezes the backbone and needs `pretrained`")));
                }
            }
            _ => {}
        }
        for &v in &self.variants {
            TrainConfig {
                variant: v,
                ..self.train.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    /// Load or train the backbone named by `pretrained`.
    pub fn load_backbone<T: Real>(&self) -> Result<Option<GatedModel<T>>> {
        match &self.pretrained {
            None => Ok(None),
            Some(BackboneSource::Checkpoint(p)) => Ok(Some(GatedModel::load(p)?.0)),
            Some(BackboneSource::Pretrain(pre)) => {
                let mut p = pre.pretrainer::<T>(None)?;
                p.run(None)?;
                Ok(Some(p.best_model().clone()))
            }
        }
    }

    /// Every (variant, permutation) pair, permutation-major, variants in
    /// canonical order without duplicates.
    pub fn run_ids(&self) -> Vec<(Variant, usize)> {
        let mut variants = self.variants.clone();
        variants.sort_unstable();
        variants.dedup();
        let mut ids = Vec::with_capacity(variants.len() * self.permutations);
        for p in 0..self.permutations {
            for &v in &variants {
                ids.push((v, p));
            }
        }
        ids
    }
}

/// Everything one (variant, permutation) run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub permutation: usize,
    pub seed: u64,
    pub precision: String,
    /// Subject order of the stream.
    pub order: Vec<u32>,
    pub accuracy: AccuracyMatrix,
    pub metrics: MetricsRecord,
    pub past_task_reads: u64,
    pub config: TrainConfig,
    pub logs: Vec<TaskLog>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn file_stem(&self) -> String {
        let slug: String = self
            .variant
            .to_string()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
            .collect();
        format!("{slug}_p{:03}", self.permutation)
    }
}

pub fn precision_name<T: Real>() -> &'static str {
    if T::BYTES == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// One run: build the permuted stream, the variant's model, and train through it.
pub fn run_one<T: Real>(
    spec: &ExperimentSpec,
    data: &PreparedData,
    pretrained: Option<&GatedModel<T>>,
    variant: Variant,
    permutation: usize,
) -> Result<RunRecord> {
    let start = Instant::now();
    let seed = spec.seed + permutation as u64;
    let stream = make_task_stream(&data.windows, data.num_classes, seed)?;
    let config = TrainConfig {
        variant,
        seed,
        ..spec.train.clone()
    };
    let backbone = match pretrained {
        Some(m) => m.config().backbone.clone(),
        None => spec.backbone.clone().unwrap_or_else(|| BackboneConfig::compact(data.channels)),
    };
    if backbone.in_channels != data.channels {
        return Err(Error::invalid(format!(
            "backbone expects {} channels, data has {}",
            backbone.in_channels, data.channels
        )));
    }
    let base = ModelConfig::new(backbone, data.num_classes);
    let model = build_model(&base, pretrained, &config)?;
    let result = run_stream(model, &stream, &config)?;
    Ok(RunRecord {
        variant,
        permutation,
        seed,
        precision: precision_name::<T>().into(),
        order: stream.order(),
        accuracy: result.accuracy,
        metrics: result.metrics,
        past_task_reads: result.past_task_reads,
        config,
        logs: result.logs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Every run of `spec` on a pool of `jobs` workers, in [`ExperimentSpec::run_ids`] order.
pub fn run_sweep<T: Real>(
    spec: &ExperimentSpec,
    data: &PreparedData,
    pretrained: Option<&GatedModel<T>>,
    jobs: usize,
) -> Result<Vec<Result<RunRecord>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let ids = spec.run_ids();
    Ok(pool.install(|| {
        ids.par_iter()
            .map(|&(v, p)| run_one(spec, data, pretrained, v, p))
            .collect()
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub summary: MetricsSummary,
}

/// Per-variant FA/FM/LA mean and sample standard deviation over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    /// One row per variant, in the canonical variant order.
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut variants: Vec<Variant> = records.iter().map(|r| r.variant).collect();
        variants.sort_unstable();
        variants.dedup();
        let rows = variants
            .into_iter()
            .map(|v| {
                let ms: Vec<MetricsRecord> = records.iter().filter(|r| r.variant == v).map(|r| r.metrics).collect();
                ReportRow {
                    variant: v,
                    summary: summarize(&ms),
                }
            })
            .collect();
        ReportTable { rows }
    }

    pub fn row(&self, variant: Variant) -> Option<&MetricsSummary> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| &r.summary)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["variant", "runs", "fa_mean", "fa_std", "fm_mean", "fm_std", "la_mean", "la_std"])
            .map_err(io)?;
        for r in &self.rows {
            let s = &r.summary;
            let mut rec = vec![r.variant.to_string(), s.runs.to_string()];
            for m in [s.fa, s.fm, s.la] {
                rec.push(m.mean.to_string());
                rec.push(m.std.to_string());
            }
            w.write_record(&rec).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Aligned text, values in percent.
    pub fn to_text(&self) -> String {
        let cell = |m: crate::continual::MeanStd| format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std);
        let mut lines = vec![["variant".to_string(), "runs".into(), "FA".into(), "FM".into(), "LA".into()]];
        for r in &self.rows {
            let s = &r.summary;
            lines.push([r.variant.to_string(), s.runs.to_string(), cell(s.fa), cell(s.fm), cell(s.la)]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let mut line = String::new();
            for (c, v) in l.iter().enumerate() {
                let pad = widths[c] - v.chars().count();
                if c == 0 {
                    let _ = write!(line, "{v}{}", " ".repeat(pad));
                } else {
                    let _ = write!(line, "  {}{v}", " ".repeat(pad));
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

#[derive(Serialize)]
struct RunMetrics<'a> {
    variant: Variant,
    permutation: usize,
    seed: u64,
    order: &'a [u32],
    accuracy: &'a AccuracyMatrix,
    metrics: MetricsRecord,
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    runs: Vec<RunMetrics<'a>>,
    table: ReportTable,
}

/// Metrics of every run plus the aggregate table. Contains no timings, so
/// identical runs give identical bytes.
pub fn metrics_json(records: &[RunRecord]) -> Result<String> {
    let doc = MetricsDocument {
        runs: records
            .iter()
            .map(|r| RunMetrics {
                variant: r.variant,
                permutation: r.permutation,
                seed: r.seed,
                order: &r.order,
                accuracy: &r.accuracy,
                metrics: r.metrics,
            })
            .collect(),
        table: ReportTable::from_records(records),
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

/// `A` as a square CSV with empty cells below the diagonal.
pub fn accuracy_csv(a: &AccuracyMatrix) -> String {
    let mut out = String::new();
    for row in a.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Accuracy trajectory of every subject of every run: `variant, permutation,
/// task, subject` followed by `A[t][t..]`, so a stream of `T` tasks yields
/// rows carrying `T, T-1, ..., 1` accuracies.
pub fn trajectories_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(["variant", "permutation", "task", "subject", "accuracy"])
        .map_err(io)?;
    for r in records {
        for (t, &subject) in r.order.iter().enumerate() {
            let mut rec = vec![r.variant.to_string(), r.permutation.to_string(), t.to_string(), subject.to_string()];
            for v in r.accuracy.trajectory(t) {
                let v = v.ok_or(Error::MissingEntry { row: t, col: t })?;
                rec.push(v.to_string());
            }
            w.write_record(&rec).map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write run records, per-run accuracy matrices, `metrics.json` and the
/// report table under `out`.
pub fn write_outputs(out: &Path, records: &[RunRecord]) -> Result<ReportTable> {
    let runs = out.join("runs");
    std::fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    for r in records {
        let stem = r.file_stem();
        write_file(&runs.join(format!("{stem}.json")), &serde_json::to_string_pretty(r)?)?;
        write_file(&runs.join(format!("{stem}_accuracy.csv")), &accuracy_csv(&r.accuracy))?;
    }
    write_file(&out.join("metrics.json"), &metrics_json(records)?)?;
    write_report(out, records)
}

/// Table (CSV and text) and trajectories for `records`.
pub fn write_report(out: &Path, records: &[RunRecord]) -> Result<ReportTable> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let table = ReportTable::from_records(records);
    write_file(&out.join("table.csv"), &table.to_csv()?)?;
    write_file(&out.join("table.txt"), &table.to_text())?;
    write_file(&out.join("trajectories.csv"), &trajectories_csv(records)?)?;
    Ok(table)
}

/// Read every run record in `dir/runs` (or `dir` itself), sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let runs = if dir.join("runs").is_dir() { dir.join("runs") } else { dir.to_path_buf() };
    let entries = std::fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        records.push(serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no run records in {}", runs.display())));
    }
    records.sort_by_key(|r: &RunRecord| (r.permutation, r.variant));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, base: &str) -> Result<ExperimentSpec> {
        let spec = ExperimentSpec::from_json(text, Path::new(base))?;
        spec.validate()?;
        Ok(spec)
    }

    #[test]
    fn unknown_fields_are_reported() {
        let err = parse("{\n  \"variants\": [\"base\"],\n  \"permutaions\": 2\n}", ".").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("permutaions") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn bad_variant_name_is_rejected() {
        let err = parse(r#"{"variants": ["frozen+gate"]}"#, ".").unwrap_err();
        assert!(err.to_string().contains("frozen+gate"));
    }

    #[test]
    fn frozen_variants_need_a_backbone() {
        let err = parse(r#"{"variants": ["frozen"]}"#, ".").unwrap_err();
        assert!(err.to_string().contains("pretrained"));
        assert!(parse(r#"{"variants": ["base"], "permutations": 1}"#, ".").is_ok());
    }

    #[test]
    fn missing_csv_is_rejected() {
        let err = parse(
            r#"{"variants": ["base"], "data": {"kind": "csv", "csv": "nope.csv", "manifest": "nope.json"}}"#,
            "/nonexistent",
        )
        .unwrap_err();
        assert!(err.to_string().contains("nope.csv"));
    }
}
