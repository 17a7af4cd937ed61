//! Experiment harness: datasets, checkpoints, result records and config files.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod records;
