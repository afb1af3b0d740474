// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace storage, file formats and the `rlens` command line on top of
//! `rlens-core`.

pub mod cli;
pub mod commands;
pub mod error;
pub mod images;
pub mod io;
pub mod metrics;
pub mod svg;

pub use error::{Error, Result};
