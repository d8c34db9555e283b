use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{AdapterConfig, GateConfig, GateInit, GateMode, ModelConfig};

/// Experiment arm: what is trainable and which anti-forgetting mechanism is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Trainable backbone, no gates.
    Base,
    /// Trainable backbone with gates.
    BaseGates,
    /// Frozen backbone, classifier only.
    Frozen,
    /// Frozen backbone, gates and classifier.
    FrozenGates,
    /// Frozen backbone with `n` dense adapter layers before the classifier.
    FrozenStacked(usize),
    /// Frozen backbone, one gate set per subject.
    TaskAware,
    /// Frozen gates plus distillation from the previous-task model.
    Kd,
    /// Frozen gates plus cross-entropy on replayed samples.
    Replay,
    /// Frozen gates plus logit matching on replayed samples.
    Der,
    /// Frozen gates plus both replay terms.
    DerPlusPlus,
}

impl Variant {
    pub fn has_gates(self) -> bool {
        !matches!(self, Variant::Base | Variant::Frozen | Variant::FrozenStacked(_))
    }

    pub fn frozen_backbone(self) -> bool {
        !matches!(self, Variant::Base | Variant::BaseGates)
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, Variant::Replay | Variant::Der | Variant::DerPlusPlus)
    }

    pub fn uses_kd(self) -> bool {
        self == Variant::Kd
    }

    pub fn task_aware(self) -> bool {
        self == Variant::TaskAware
    }

    /// Model layout for this variant on top of `base`'s backbone and class count.
    pub fn model_config(self, base: &ModelConfig, gate_init: GateInit) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.gates = if self.has_gates() {
            Some(base.gates.unwrap_or_default())
        } else {
            None
        };
        cfg.mode = if self.task_aware() {
            GateMode::TaskAware { init: gate_init }
        } else {
            GateMode::TaskFree
        };
        cfg.adapters = AdapterConfig {
            layers: match self {
                Variant::FrozenStacked(n) => n,
                _ => 0,
            },
            ..base.adapters
        };
        if cfg.gates.is_none() && self.has_gates() {
            cfg.gates = Some(GateConfig::default());
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Base => f.write_str("base"),
            Variant::BaseGates => f.write_str("base+gates"),
            Variant::Frozen => f.write_str("frozen"),
            Variant::FrozenGates => f.write_str("frozen+gates"),
            Variant::FrozenStacked(n) => write!(f, "frozen+stacked{n}"),
            Variant::TaskAware => f.write_str("task_aware"),
            Variant::Kd => f.write_str("kd"),
            Variant::Replay => f.write_str("replay"),
            Variant::Der => f.write_str("der"),
            Variant::DerPlusPlus => f.write_str("der++"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base" => Variant::Base,
            "base+gates" => Variant::BaseGates,
            "frozen" => Variant::Frozen,
            "frozen+gates" => Variant::FrozenGates,
            "task_aware" => Variant::TaskAware,
            "kd" => Variant::Kd,
            "replay" => Variant::Replay,
            "der" => Variant::Der,
            "der++" => Variant::DerPlusPlus,
            other => match other.strip_prefix("frozen+stacked").map(str::parse::<usize>) {
                Some(Ok(n)) => Variant::FrozenStacked(n),
                _ => return Err(Error::invalid(format!("unknown variant {other:?}"))),
            },
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    /// Coefficient of the squared-norm penalty on trainable parameters.
    pub l2: f64,
    pub batch_size: usize,
    pub clip: Option<f64>,
    pub seed: u64,
    /// Fraction of each task's training windows held out for early stopping.
    pub val_fraction: f64,
    pub kd_alpha: f64,
    pub kd_temperature: f64,
    pub buffer_capacity: usize,
    pub replay_batch: usize,
    /// Weight of the logit-matching replay term.
    pub der_alpha: f64,
    /// Weight of the replay cross-entropy term in `der++`.
    pub der_beta: f64,
    pub gate_init: GateInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::FrozenGates,
            epochs: 100,
            patience: 10,
            lr: 1e-3,
            l2: 1e-4,
            batch_size: 64,
            clip: Some(1.0),
            seed: 0,
            val_fraction: 0.1,
            kd_alpha: 0.5,
            kd_temperature: 2.0,
            buffer_capacity: 500,
            replay_batch: 32,
            der_alpha: 0.5,
            der_beta: 0.5,
            gate_init: GateInit::Warm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kd_alpha) {
            return Err(Error::invalid(format!("kd_alpha {} not in [0, 1]", self.kd_alpha)));
        }
        if self.kd_temperature <= 0.0 {
            return Err(Error::invalid("kd_temperature must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if self.lr < 0.0 || self.l2 < 0.0 {
            return Err(Error::invalid("lr and l2 must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must be in [0, 1)"));
        }
        if self.variant.uses_replay() && (self.buffer_capacity == 0 || self.replay_batch == 0) {
            return Err(Error::invalid(format!("{} needs a nonempty buffer and replay batch", self.variant)));
        }
        Ok(())
    }
}
