//! Experiment front end: configuration, orchestration and report files.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
