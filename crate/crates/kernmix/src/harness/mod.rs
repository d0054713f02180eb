//! Experiment orchestration: run configuration, the training loop with its
//! metric records, and grid sweeps with gain reporting.

pub mod config;
pub mod grid;
pub mod run;
