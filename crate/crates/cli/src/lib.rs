//! The `skullstrip` command line: phantom data generation, training,
//! evaluation, the five-way strategy comparison, curve plots and overlays.

pub mod args;
pub mod commands;
pub mod config;
pub mod render;
pub mod tables;

use std::fmt;
use std::path::Path;

pub use args::{Cli, Command};
pub use config::RunConfig;

/// A failure with the short category printed as `error[<category>]`.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(category: &'static str, message: impl Into<String>) -> Self {
        CliError { category, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new("usage", message)
    }

    pub(crate) fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::new("io", format!("{}: {e}", path.display()))
    }

    /// Prefixes the message, keeping the category.
    pub fn context(self, what: impl fmt::Display) -> Self {
        CliError { category: self.category, message: format!("{what}: {}", self.message) }
    }

    /// One line, as printed on stderr.
    pub fn line(&self) -> String {
        let msg: String = self.message.chars().map(|c| if c == '\n' { ' ' } else { c }).collect();
        format!("error[{}]: {msg}", self.category)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<skullstrip_core::Error> for CliError {
    fn from(e: skullstrip_core::Error) -> Self {
        CliError::new(e.category(), e.to_string())
    }
}

impl From<skullstrip_core::TensorError> for CliError {
    fn from(e: skullstrip_core::TensorError) -> Self {
        skullstrip_core::Error::from(e).into()
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Runs one parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    commands::dispatch(cli)
}
