//! File formats, run manifests and the command line for the `integra-core`
//! estimators.

pub mod cli;
pub mod error;
pub mod io;
pub mod manifest;
