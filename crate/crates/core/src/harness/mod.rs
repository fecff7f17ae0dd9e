//! Experiment orchestration: configuration, seeded runs, sweeps and reports.

mod config;
mod experiment;
mod report;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{ConfigError, DataSource, ExperimentConfig, FrameSize, Seeds, KEYS};
pub use experiment::{
    prepare_data, pretrain_system, run_attack, run_experiment, sweep, train_config, Prepared, Pretrained,
};
pub use report::{
    channel_summary, read_frames_csv, write_frames_csv, write_sweep_csv, ChannelReport, ChannelSummary,
    ExperimentReport, HarvestSummary, Phase, RoundRow,
};

use crate::covert::CovertError;
use crate::data::DataError;
use crate::defense::DefenseError;
use crate::fl::FlError;
use crate::metrics::MetricsError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Covert(#[from] CovertError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error("calibration failed: {found} edge examples in {pairs} pairs, {needed} needed")]
    Calibration { found: usize, needed: usize, pairs: usize },
    #[error("receiver not selected often enough within {rounds} rounds")]
    FrameEstimation { rounds: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Parse(String),
}
