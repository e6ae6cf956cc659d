//! Orchestration behind the `filmvox` binary: every subcommand is a plain
//! function over directories so it can be driven from tests.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{
    cmd_eval, cmd_preprocess, cmd_report, cmd_saliency, cmd_synth, cmd_train, load_processed,
    validate_raw_dataset, RawSummary,
};
pub use config::{load_config, parse_config, Overrides, PipelineConfig, SeedTarget};
pub use manifest::{manifest_hash, Manifest, RunLock};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("{0} is locked by another command (remove .lock if stale)")]
    Locked(String),

    #[error(transparent)]
    Core(#[from] filmvox::Error),
}

impl CliError {
    /// 2 config, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) | CliError::Locked(_) => 3,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

pub fn core_exit_code(e: &filmvox::Error) -> i32 {
    match e {
        filmvox::Error::InvalidArgument(_) => 2,
        filmvox::Error::Numerical(_) => 4,
        _ => 3,
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
