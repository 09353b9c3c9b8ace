//! End-to-end runs driven by a TOML config: dataset rendering, teacher training,
//! pruning, distillation, evaluation, projection, editing and reports.

pub mod config;
pub mod experiments;
pub mod plots;
pub mod run;
pub mod stages;

pub use config::{EditConfig, MaskSource, ModelConfig, PruningConfig, RunConfig, TeacherConfig};
pub use run::{Manifest, RunDir};
pub use stages::{discover_runs, report, ImageSource, ModelRef, Pipeline, StageStatus};
