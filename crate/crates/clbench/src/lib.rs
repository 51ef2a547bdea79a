//! Experiment runner for the `clbench-core` engine: dataset readers,
//! experiment configs, run artifacts, sweeps and reports.

pub mod archinfo;
pub mod checkpoint;
pub mod config;
pub mod idx;
pub mod report;
pub mod run;
pub mod sweep;
