//! Training, evaluation, checkpointing, complexity accounting and the
//! ablation suite.

pub mod ablation;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use ablation::{run_ablation_suite, AblationData, AblationReport};
pub use checkpoint::Checkpoint;
pub use complexity::{benchmark_latency, count_params, estimate_flops, BenchReport, LatencyStats};
pub use config::RunConfig;
pub use metrics::{EpochMetrics, Metrics};
pub use train::{evaluate, fit, train, TrainOutcome, Trainer};
