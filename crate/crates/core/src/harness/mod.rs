//! Experiment commands: artifact build, backbone replacement, mechanistic
//! step sweep, ablation grids and the summary report.

mod ablations;
mod build;
pub mod config;
mod eval;
mod mech_sweep;
mod replacement;
mod report;
pub mod svg;

pub use ablations::{cmd_ablations, AblationOutcome, Grid};
pub use build::{
    cmd_build_all, datasets, ArtifactPaths, Artifacts, StageHashes, StageReport, StageStatus, STAGES,
};
pub use config::{ArmConfig, ExperimentConfig};
pub use eval::{eval_seed, read_csv, CellRow, EvalContext};
pub use mech_sweep::{cmd_mech_sweep, render_pattern, MechSweepOutcome};
pub use replacement::{cmd_replacement, ArmSummary, DistillCheck, PromptRow, ReplacementReport};
pub use report::cmd_report;
