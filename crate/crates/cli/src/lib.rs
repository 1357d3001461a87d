//! Experiment runners behind the `chainplan` binary: configuration, training,
//! composition, ablation, gap verification and evaluation. Output formats
//! are described in `docs/formats.md`.

pub mod compose;
pub mod config;
pub mod error;
pub mod eval;
pub mod gap;
pub mod io;
pub mod train;

pub use config::ExperimentConfig;
pub use error::CliError;
