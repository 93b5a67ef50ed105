use std::process::ExitCode;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or input files; exit code 2.
    #[error("{0}")]
    Input(String),
    /// Failure while estimating; exit code 3.
    #[error("{0}")]
    Runtime(String),
}

impl From<ipsi_core::Error> for CliError {
    fn from(e: ipsi_core::Error) -> Self {
        use ipsi_core::Error as E;
        match e {
            E::Fit(_) | E::Invariant(_) | E::Undefined(_) | E::Complexity(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn to_json(&self) -> String {
        let kind = match self {
            CliError::Input(_) => "input",
            CliError::Runtime(_) => "runtime",
        };
        json!({ "error": { "kind": kind, "message": self.to_string(), "exit_code": self.exit_code() } }).to_string()
    }

    pub fn report(&self) -> ExitCode {
        eprintln!("{}", self.to_json());
        ExitCode::from(self.exit_code())
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}
