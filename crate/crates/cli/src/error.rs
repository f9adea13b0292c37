use std::fmt;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    MissingInput,
    InvalidInput,
    OutputExists,
    Io,
    Scorer,
    Training,
    Check,
}

/// Failure of a command; printed to stderr as one JSON object.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn missing_input(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::MissingInput, message)
    }

    pub fn invalid_input(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::InvalidInput, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, message)
    }

    pub fn record(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<clarify_core::scorer::ScorerError> for CliError {
    fn from(e: clarify_core::scorer::ScorerError) -> Self {
        Self::new(ErrorKind::Scorer, e.to_string())
    }
}

impl From<clarify_core::cpo::CpoError> for CliError {
    fn from(e: clarify_core::cpo::CpoError) -> Self {
        Self::new(ErrorKind::Training, e.to_string())
    }
}

impl From<clarify_core::corpus::CorpusError> for CliError {
    fn from(e: clarify_core::corpus::CorpusError) -> Self {
        Self::invalid_input(e.to_string())
    }
}

impl From<clarify_core::jsonl::JsonlError> for CliError {
    fn from(e: clarify_core::jsonl::JsonlError) -> Self {
        Self::invalid_input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}
