//! The end-to-end attack: generate, score, de-duplicate, select, verify,
//! label, report.

pub mod config;
pub mod io;
pub mod labels;
pub mod report;
pub mod run;
pub mod select;

pub use config::AttackConfig;
pub use run::{run_attack, RunManifest, RunSummary};
