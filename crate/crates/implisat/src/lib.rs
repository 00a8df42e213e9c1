//! File formats and command line for the `implisat-core` model: band
//! manifests with raw payloads, the binary checkpoint codec, CSV reports and
//! the `implisat` binary.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
pub use implisat_core as core;
