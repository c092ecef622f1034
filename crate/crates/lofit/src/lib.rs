// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, experiment orchestration and the `lofit` command line on
//! top of `lofit-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
