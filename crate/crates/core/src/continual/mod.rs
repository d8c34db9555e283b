//! Sequential training over a subject stream and its evaluation.

mod config;
mod losses;
mod metrics;
mod pretrain;
mod replay;
mod trainer;

pub use config::{TrainConfig, Variant};
pub use losses::{kd_loss, l2_penalty};
pub use metrics::{compute_metrics, summarize, AccuracyMatrix, MeanStd, MetricsRecord, MetricsSummary};
pub use pretrain::{PretrainConfig, Pretrainer};
pub use replay::{replay_losses, BufferEntry, ReplayBuffer};
pub use trainer::{
    batches, build_model, evaluate, run_stream, stratified_holdout, train_task, EpochLog, StreamResult, TaskContext,
    TaskLog,
};
