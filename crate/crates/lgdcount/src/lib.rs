//! File formats, reports and the `lgdcount` command line around
//! [`lgd_core`].

pub mod checkpoint;
pub mod cli;
pub mod dataset;
mod error;
pub mod formats;
pub mod report;

pub use error::{Error, Result};
