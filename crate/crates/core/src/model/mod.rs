//! Residual 1-D CNN backbone, channel gates, adapters and classifier.

mod checkpoint;
pub mod config;
pub mod gate;
mod network;

pub use config::{AdapterConfig, BackboneConfig, GateConfig, GateInit, GateMode, ModelConfig, StackConfig};
pub use gate::{apply_gate, gate_forward};
pub use network::{
    Forward, GateParams, GatedModel, Group, LayerTrace, LayerVars, ParamCount, Pass, Trace, INITIAL_GATE,
};
