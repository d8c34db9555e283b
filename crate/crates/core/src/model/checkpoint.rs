use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::GatedModel;
use crate::container;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: ModelConfig,
    gate_sets: usize,
    subjects: Vec<(u32, usize)>,
    params: Vec<ParamEntry>,
    /// Free-form producer metadata (epoch, validation accuracy, ...).
    #[serde(default)]
    meta: serde_json::Value,
}

const KIND: &str = "gated_model";

impl<T: Real> GatedModel<T> {
    pub fn to_bytes(&self, meta: serde_json::Value) -> Result<Vec<u8>> {
        let manifest = Manifest {
            kind: KIND.into(),
            config: self.config().clone(),
            gate_sets: self.gate_set_count(),
            subjects: self.subjects().iter().map(|(&t, &i)| (t, i)).collect(),
            params: self
                .params()
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            meta,
        };
        container::encode(&serde_json::to_value(&manifest)?, &self.names_and_buffers())
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let bytes = self.to_bytes(meta)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Returns the model and the producer metadata stored with it.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let (m, tensors) = container::decode::<T>(bytes)?;
        Self::rebuild(m, tensors)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (m, tensors) = container::read::<T>(path)?;
        Self::rebuild(m, tensors).map_err(|e| match e {
            Error::Container { reason, .. } => Error::Container {
                path: Some(path.to_path_buf()),
                reason,
            },
            other => other,
        })
    }

    fn rebuild(m: serde_json::Value, tensors: Vec<(String, Tensor<T>)>) -> Result<(Self, serde_json::Value)> {
        let bad = |reason: String| Error::Container { path: None, reason };
        let manifest: Manifest = serde_json::from_value(m)?;
        if manifest.kind != KIND {
            return Err(bad(format!("expected a {KIND} container, found {}", manifest.kind)));
        }
        let mut model = GatedModel::<T>::new(manifest.config, 0)?;
        model.ensure_gate_sets(manifest.gate_sets)?;
        model.set_subjects(manifest.subjects.into_iter().collect::<BTreeMap<_, _>>());
        let mut by_name: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        if manifest.params.len() != model.params().len() {
            return Err(bad(format!(
                "manifest lists {} parameters, architecture has {}",
                manifest.params.len(),
                model.params().len()
            )));
        }
        for (entry, p) in manifest.params.iter().zip(model.params_mut().iter_mut()) {
            if entry.name != p.name {
                return Err(bad(format!("parameter order mismatch: {} vs {}", entry.name, p.name)));
            }
            let v = by_name
                .remove(&entry.name)
                .ok_or_else(|| bad(format!("missing tensor {}", entry.name)))?;
            if v.shape() != p.value.shape() {
                return Err(bad(format!("tensor {} has shape {:?}", entry.name, v.shape())));
            }
            p.value = v;
            p.trainable = entry.trainable;
        }
        for (i, s) in model.bn_stats_mut().iter_mut().enumerate() {
            for (suffix, slot) in [("running_mean", &mut s.running_mean), ("running_var", &mut s.running_var)] {
                let name = format!("bn{i}.{suffix}");
                let v = by_name.remove(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
                if v.shape() != slot.shape() {
                    return Err(bad(format!("tensor {name} has shape {:?}", v.shape())));
                }
                *slot = v;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok((model, manifest.meta))
    }
}
