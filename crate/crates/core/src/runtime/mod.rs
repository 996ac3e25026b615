//! Configuration, persistence and the `run` / `eval` / `ablate` / `report`
//! commands.

mod commands;
mod config;
mod runfile;

pub use commands::{
    build_provider, cmd_ablate, cmd_eval, cmd_report, cmd_run, evaluate_runs, load_report,
    write_report, AblateSummary, RunSummary,
};
pub use config::{parse_ablation_list, PromptsConfig, ProviderConfig, ProviderKind, RunConfig};
pub use runfile::{load_dataset, prepare_resume, read_run_file, RunWriter};

use thiserror::Error;

/// Command failure, mapped one-to-one onto process exit codes.
#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("validation error: {0}")]
    Validation(String),
}

impl RuntimeError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RuntimeError::Config(_) | RuntimeError::Io(_) => 1,
            RuntimeError::Provider(_) => 2,
            RuntimeError::Validation(_) => 3,
        }
    }
}
