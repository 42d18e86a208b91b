//! Experiment harness around `clslam-core`: on-disk scene datasets, TOML
//! experiment configs, deployment orchestration across methods and plan
//! sequences, and report files.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;
