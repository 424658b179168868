//! Command-line driver: configuration loading and one function per
//! subcommand. The `dualm` binary is a thin clap layer over [`commands`].

pub mod commands;
pub mod config;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] dualm::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// The message on one line, as printed before a nonzero exit.
    pub fn one_line(&self) -> String {
        self.to_string()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }
}
