//! Library surface of the `mone` command-line tool, exposed so integration
//! tests can drive the pipeline in-process.

pub mod commands;
pub mod config;
