//! Synthetic scenes, experiment presets, metrics and output files.

pub mod config;
pub mod metrics;
pub mod output;
pub mod presets;
pub mod scene;
