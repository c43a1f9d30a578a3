//! Command-line driver for the leafaug pipeline.
//!
//! The binary is a thin wrapper: argument parsing lives in `main.rs`, and
//! each subcommand is a function in [`commands`] taking the resolved
//! [`config::PipelineConfig`].

pub mod commands;
pub mod config;
pub mod failure;
pub mod ganfix;
pub mod meta;
