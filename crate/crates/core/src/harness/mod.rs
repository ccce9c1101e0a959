//! Configuration, experiment orchestration and file output.

pub mod cli;
pub mod config;
pub mod csv;
pub mod sweep;
