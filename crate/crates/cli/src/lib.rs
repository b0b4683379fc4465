//! Configuration loading and subcommands of the `priorzero` binary.

pub mod commands;
pub mod config;
pub mod error;
