//! File formats, corpus IO, CSV reports and the command-line harness.

pub mod cli;
pub mod commands;
pub mod corpus;
pub mod error;
pub mod format;
pub mod io;

pub use error::{LabError, LabResult};
