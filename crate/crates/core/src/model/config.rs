use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One residual stack: a chain of conv + batch-norm layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub channels: usize,
    pub kernels: Vec<usize>,
    /// Applied on the first layer whose kernel is larger than 1.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub embed_width: usize,
    pub stacks: Vec<StackConfig>,
}

impl BackboneConfig {
    /// The reference four-stack architecture (256, 256, 384, 512, 512 channels).
    pub fn reference(in_channels: usize) -> Self {
        let stack = |channels, kernels: [usize; 4], stride| StackConfig {
            channels,
            kernels: kernels.to_vec(),
            stride,
        };
        BackboneConfig {
            in_channels,
            embed_width: 256,
            stacks: vec![
                stack(256, [1, 3, 3, 1], 1),
                stack(384, [1, 5, 3, 1], 1),
                stack(512, [1, 3, 3, 1], 2),
                stack(512, [1, 3, 3, 1], 2),
            ],
        }
    }

    /// Same layout as [`BackboneConfig::reference`] with every width divided by 16.
    pub fn compact(in_channels: usize) -> Self {
        Self::reference(in_channels).scaled(16)
    }

    pub fn scaled(mut self, divisor: usize) -> Self {
        self.embed_width = (self.embed_width / divisor).max(1);
        for s in &mut self.stacks {
            s.channels = (s.channels / divisor).max(1);
        }
        self
    }

    pub fn out_channels(&self) -> usize {
        self.stacks.last().map_or(self.embed_width, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embed_width == 0 {
            return Err(Error::invalid("backbone widths must be positive"));
        }
        if self.stacks.is_empty() {
            return Err(Error::invalid("backbone needs at least one stack"));
        }
        for (i, s) in self.stacks.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 || s.kernels.is_empty() {
                return Err(Error::invalid(format!("stack {i}: zero width, stride or depth")));
            }
            if s.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
                return Err(Error::invalid(format!("stack {i}: kernels must be odd")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub reduction: usize,
    pub min_hidden: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            reduction: 8,
            min_hidden: 16,
        }
    }
}

impl GateConfig {
    pub fn hidden(&self, channels: usize) -> usize {
        (channels / self.reduction.max(1)).max(self.min_hidden)
    }

    /// Weight count of one gate on a `channels`-wide stack output.
    pub fn param_count(&self, channels: usize) -> usize {
        2 * channels * self.hidden(channels)
    }
}

/// Fully connected layers inserted between pooling and the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub layers: usize,
    pub width: usize,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            layers: 0,
            width: 512,
            dropout: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInit {
    /// Copy the most recent gate set.
    Warm,
    /// Draw a fresh gate set.
    Cold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GateMode {
    /// One gate set shared by every subject.
    TaskFree,
    /// One gate set per subject, selected by subject id.
    TaskAware { init: GateInit },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` builds the model without gates.
    pub gates: Option<GateConfig>,
    pub num_classes: usize,
    pub classifier_bias: bool,
    pub adapters: AdapterConfig,
    pub mode: GateMode,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, num_classes: usize) -> Self {
        ModelConfig {
            backbone,
            gates: Some(GateConfig::default()),
            num_classes,
            classifier_bias: true,
            adapters: AdapterConfig::default(),
            mode: GateMode::TaskFree,
        }
    }

    pub fn without_gates(mut self) -> Self {
        self.gates = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if matches!(self.mode, GateMode::TaskAware { .. }) && self.gates.is_none() {
            return Err(Error::invalid("task-aware mode requires gates"));
        }
        if !(0.0..1.0).contains(&self.adapters.dropout) {
            return Err(Error::invalid("adapter dropout must be in [0, 1)"));
        }
        if self.adapters.layers > 0 && self.adapters.width == 0 {
            return Err(Error::invalid("adapter width must be positive"));
        }
        Ok(())
    }
}
