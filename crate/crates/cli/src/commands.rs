use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use gatecl::continual::{build_model, train_task, TaskContext, TrainConfig, Variant};
use gatecl::data::{make_task_stream, PreprocessConfig};
use gatecl::experiment::{
    load_records, precision_name, prepare, run_sweep, write_outputs, write_report, BackboneSource, DataSource,
    ExperimentSpec, PretrainSpec,
};
use gatecl::model::{GatedModel, ModelConfig};
use gatecl::numerics::Real;
use gatecl::theory::{
    expressiveness_suite, feature_drift_suite, logit_drift_suite, margin_suite, model_drift_report, run_all,
    VerificationReport, VerifyConfig,
};
use serde::Deserialize;
use serde_json::json;

use crate::{Classify, Common, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

fn precision() -> Result<Precision, Failure> {
    match std::env::var("GATECL_PRECISION") {
        Err(std::env::VarError::NotPresent) => Ok(Precision::F32),
        Ok(v) if v == "f32" => Ok(Precision::F32),
        Ok(v) if v == "f64" => Ok(Precision::F64),
        Ok(v) => Err(Failure::Usage(anyhow!("GATECL_PRECISION must be f32 or f64, got {v:?}"))),
        Err(e) => Err(Failure::Usage(anyhow!("GATECL_PRECISION: {e}"))),
    }
}

fn read_config(path: &Path) -> Result<(String, PathBuf), Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .usage()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((text, base))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).runtime()?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()
}

pub fn pretrain(common: &Common, resume: bool, epochs: Option<usize>) -> Result<(), Failure> {
    let mut spec = match &common.config {
        Some(p) => {
            let (text, base) = read_config(p)?;
            PretrainSpec::from_json(&text, &base)
                .with_context(|| format!("config {}", p.display()))
                .usage()?
        }
        None => PretrainSpec::default(),
    };
    if let Some(s) = common.seed {
        spec.train.seed = s;
    }
    if let Some(e) = epochs {
        spec.train.epochs = e;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("pretrained"));
    let state = out.join("state");
    if resume && !state.join("optimizer.gclt").exists() {
        return Err(Failure::Usage(anyhow!("no saved state in {}", state.display())));
    }
    match precision()? {
        Precision::F32 => pretrain_with::<f32>(&spec, &out, resume),
        Precision::F64 => pretrain_with::<f64>(&spec, &out, resume),
    }
}

fn pretrain_with<T: Real>(spec: &PretrainSpec, out: &Path, resume: bool) -> Result<(), Failure> {
    let state = out.join("state");
    let mut p = spec
        .pretrainer::<T>(resume.then_some(state.as_path()))
        .context("setting up pretraining")
        .runtime()?;
    while !p.finished() {
        let e = p.step_epoch().runtime()?;
        p.save_state(&state).runtime()?;
        log::info!("epoch {} loss {:.5} val_acc {:?}", e.epoch, e.train_loss, e.val_acc);
    }
    let best = p.best_epoch();
    let val_acc = best.and_then(|b| p.log().iter().find(|e| e.epoch == b)).and_then(|e| e.val_acc);
    let meta = json!({
        "best_epoch": best,
        "val_acc": val_acc,
        "epochs_run": p.epoch(),
        "precision": precision_name::<T>(),
    });
    let ckpt = out.join("pretrained.gclt");
    p.best_model().save(&ckpt, meta).runtime()?;
    write_json(&out.join("pretrain_log.json"), &p.log())?;
    println!(
        "pretrained for {} epochs, best epoch {best:?} (val acc {val_acc:?}), saved {}",
        p.epoch(),
        ckpt.display()
    );
    Ok(())
}

pub fn run(
    common: &Common,
    checkpoint: Option<PathBuf>,
    permutations: Option<usize>,
    variants: Option<Vec<String>>,
) -> Result<(), Failure> {
    let mut spec = match &common.config {
        Some(p) => {
            let (text, base) = read_config(p)?;
            ExperimentSpec::from_json(&text, &base)
                .with_context(|| format!("config {}", p.display()))
                .usage()?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(c) = checkpoint {
        spec.pretrained = Some(BackboneSource::Checkpoint(c));
    }
    if let Some(p) = permutations {
        spec.permutations = p;
    }
    if let Some(vs) = variants {
        spec.variants = vs
            .iter()
            .map(|v| v.parse::<Variant>())
            .collect::<Result<_, _>>()
            .usage()?;
    }
    spec.validate().usage()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    match precision()? {
        Precision::F32 => run_with::<f32>(&spec, &out, common.jobs),
        Precision::F64 => run_with::<f64>(&spec, &out, common.jobs),
    }
}

fn run_with<T: Real>(spec: &ExperimentSpec, out: &Path, jobs: usize) -> Result<(), Failure> {
    let data = prepare(&spec.data, spec.preprocess.as_ref())
        .context("preparing data")
        .runtime()?;
    for w in &data.warnings {
        log::warn!("subject {:?}: {}", w.subject, w.message);
    }
    let backbone = spec.load_backbone::<T>().context("loading backbone").runtime()?;
    let results = run_sweep(spec, &data, backbone.as_ref(), jobs).runtime()?;
    let total = results.len();
    let mut records = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for (r, (v, p)) in results.into_iter().zip(spec.run_ids()) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(format!("{v} permutation {p}: {e}")),
        }
    }
    create_dir(out)?;
    if !records.is_empty() {
        let table = write_outputs(out, &records).runtime()?;
        print!("{}", table.to_text());
    }
    if !failures.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "{} of {total} runs failed:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    let leaks: Vec<String> = records
        .iter()
        .filter(|r| r.past_task_reads > 0)
        .map(|r| format!("{} permutation {}: {} reads", r.variant, r.permutation, r.past_task_reads))
        .collect();
    if !leaks.is_empty() {
        return Err(Failure::Violation(format!(
            "earlier tasks' training data was read after they finished: {}",
            leaks.join(", ")
        )));
    }
    Ok(())
}

/// Config file of `verify`: suite settings, plus the data and training
/// settings used when a checkpoint is given.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VerifyFile {
    suites: VerifyConfig,
    data: DataSource,
    preprocess: Option<PreprocessConfig>,
    train: TrainConfig,
}

pub fn verify(
    common: &Common,
    theorem: Option<u8>,
    samples: Option<usize>,
    checkpoint: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut file = match &common.config {
        Some(p) => {
            let (text, base) = read_config(p)?;
            let mut f: VerifyFile = serde_json::from_str(&text)
                .with_context(|| format!("config {}", p.display()))
                .usage()?;
            f.data.resolve(&base);
            f.data.check_paths().usage()?;
            f
        }
        None => VerifyFile::default(),
    };
    if let Some(s) = common.seed {
        file.suites.seed = s;
        file.train.seed = s;
    }
    if let Some(n) = samples {
        let cfg = &mut file.suites;
        let slots = [
            &mut cfg.feature_drift_samples,
            &mut cfg.logit_drift_samples,
            &mut cfg.margin_samples,
            &mut cfg.expressiveness_draws,
        ];
        for (i, slot) in slots.into_iter().enumerate() {
            if theorem.is_none_or(|t| usize::from(t) == i + 1) {
                *slot = n;
            }
        }
    }
    if let Some(c) = &checkpoint {
        if !c.exists() {
            return Err(Failure::Usage(anyhow!("checkpoint {} does not exist", c.display())));
        }
    }
    let cfg = &file.suites;
    let report = match theorem {
        None => run_all(cfg),
        Some(t) => {
            let suite = match t {
                1 => feature_drift_suite(cfg),
                2 => logit_drift_suite(cfg),
                3 => margin_suite(cfg),
                _ => expressiveness_suite(cfg),
            };
            suite.map(|s| VerificationReport {
                config: cfg.clone(),
                total_violations: s.violations,
                suites: vec![s],
            })
        }
    }
    .runtime()?;
    for s in &report.suites {
        println!(
            "{:<16} samples {:>7}  skipped {:>5}  violations {}  max bound ratio {:.6}",
            s.name, s.samples, s.skipped, s.violations, s.extremal_ratio
        );
    }
    let mut violations = report.total_violations;
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_json(&out.join("verification.json"), &report)?;
    }
    if let Some(c) = &checkpoint {
        violations += verify_model(c, &file, common.out.as_deref())?;
    }
    if violations > 0 {
        return Err(Failure::Violation(format!("{violations} bound violations")));
    }
    Ok(())
}

/// Train task-free gates on the first two subjects on top of `checkpoint`
/// and check every first-subject test window between the two models.
fn verify_model(checkpoint: &Path, file: &VerifyFile, out: Option<&Path>) -> Result<usize, Failure> {
    let (pre, _) = GatedModel::<f64>::load(checkpoint).runtime()?;
    let data = prepare(&file.data, file.preprocess.as_ref()).runtime()?;
    let stream = make_task_stream(&data.windows, data.num_classes, file.train.seed).runtime()?;
    if stream.len() < 2 {
        return Err(Failure::Usage(anyhow!("model verification needs at least two subjects")));
    }
    let cfg = TrainConfig {
        variant: Variant::FrozenGates,
        ..file.train.clone()
    };
    let base = ModelConfig::new(pre.config().backbone.clone(), data.num_classes);
    let mut model = build_model(&base, Some(&pre), &cfg).runtime()?;
    train_task(&mut model, &stream.tasks[0], 0, &cfg, TaskContext::default()).runtime()?;
    let mut before = model.clone();
    train_task(&mut model, &stream.tasks[1], 1, &cfg, TaskContext::default()).runtime()?;
    let rep = model_drift_report(&mut before, &mut model, &stream.tasks[0].test).runtime()?;
    println!(
        "model check: {} windows, {} with unchanged backbone input, {} inside the margin premise, {} violations",
        rep.samples.len(),
        rep.applicable,
        rep.corollary_premises,
        rep.violations
    );
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join("verdicts.json"), &rep)?;
    }
    Ok(rep.violations)
}

pub fn report(common: &Common, run_dir: &Path) -> Result<(), Failure> {
    let records = load_records(run_dir).usage()?;
    let out = common.out.clone().unwrap_or_else(|| run_dir.to_path_buf());
    let table = write_report(&out, &records).runtime()?;
    print!("{}", table.to_text());
    Ok(())
}
