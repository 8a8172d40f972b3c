//! Reproducible runs: configuration, run directories, the metrics log, and
//! one function per command-line subcommand.

mod commands;
mod config;
mod export;
mod metrics;

pub use commands::{
    distill, gen_corpus, kmeans, pretrain, probe, profile, prune, series_name, split_dev, CorpusSummary, Session,
    RUN_ROOT_ENV,
};
pub use config::{
    apply_override, CorpusConfig, KMeansConfig, PipelineDistillConfig, PipelinePretrainConfig, PipelineProbeConfig,
    ProfileConfig, RunConfig,
};
pub use export::export_plots;
pub use metrics::{read_metrics, strip_timing, Entry, MetricsLog, MetricsRecord};
