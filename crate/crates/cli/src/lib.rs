//! Command-line driver for the toy identifiable-virtual-face pipeline.
//!
//! Each subcommand of the `ivfg` binary is a function in [`commands`] taking
//! a [`RunConfig`], so the full pipeline can also be driven from Rust.

pub mod commands;
pub mod config;
pub mod plot;

pub use config::RunConfig;
