//! Command-line experiment runner for `lmpc-core`: configuration, ablation
//! presets, per-seed output directories, run comparison and replay.

pub mod compare;
pub mod config;
pub mod replay;
pub mod run;
pub mod selftest;
