//! Dataset and checkpoint files, run configs, reports and grid search on
//! top of `srwgan-core`.

pub mod blob;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod report;

pub use srwgan_core as core;
