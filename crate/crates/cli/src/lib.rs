//! Experiment driver for the `mclrec` command: configuration, experiment
//! suites, reports, view export and synthetic fixtures.

pub mod config;
pub mod experiments;
pub mod export;
pub mod report;
pub mod synth;
