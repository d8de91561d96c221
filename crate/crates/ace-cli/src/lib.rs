//! Experiment harness for diverse-generalization training: config parsing,
//! presets, suite orchestration, result persistence, correlation reports,
//! mix-rate inference, and diagnostic SVG plots.

pub mod config;
pub mod plot;
pub mod report;
pub mod runs;
pub mod suites;
