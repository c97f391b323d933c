//! Experiment orchestration: configuration, training, checkpoints, search, reports.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod search;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{
    Arm, DataSource, ExperimentConfig, GeneratorConfig, NetworkConfig, SearchSpace, TrainConfig,
};
pub use report::{read_report_csv, render_text, summarize, write_report_csv, ReportRow};
pub use search::{random_search, SampledParams, SearchOutcome, SearchRun, TrialResult};
pub use train::{
    build_detectors, evaluate, input_hash, load_generator, network_outputs, run_experiment,
    train_from_config, train_network, validation_auroc, RunManifest, RunOptions, TrainedNetwork,
};
