use std::io;
use std::path::{Path, PathBuf};

use integra_core::data::{DataError, PanelViolations};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Usage { message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{file}:{line}: {message}")]
    Parse { file: PathBuf, line: u64, column: Option<usize>, message: String },
    #[error("{}", .errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Data { file: Option<PathBuf>, errors: Vec<DataError> },
    #[error("{message}")]
    Domain { file: Option<PathBuf>, message: String },
    #[error("{file}: content hash {found} does not match {expected} recorded in {manifest}")]
    Tamper { file: PathBuf, manifest: PathBuf, expected: String, found: String },
    #[error("{0}: no fit files found")]
    EmptyDirectory(PathBuf),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn domain(file: Option<&Path>, message: impl Into<String>) -> Self {
        CliError::Domain { file: file.map(Path::to_path_buf), message: message.into() }
    }

    pub fn violations(file: Option<&Path>, v: PanelViolations) -> Self {
        CliError::Data { file: file.map(Path::to_path_buf), errors: v.0 }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage { .. } => "usage",
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Data { .. } => "data",
            CliError::Domain { .. } => "domain",
            CliError::Tamper { .. } => "tamper",
            CliError::EmptyDirectory(_) => "empty_directory",
        }
    }

    /// One diagnostic per underlying problem.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let base = |file: Option<&Path>, message: String| Diagnostic {
            level: "error",
            kind: self.kind(),
            file: file.map(|p| p.display().to_string()),
            line: None,
            column: None,
            message,
        };
        match self {
            CliError::Io { path, source } => vec![base(Some(path), source.to_string())],
            CliError::Parse { file, line, column, message } => {
                vec![Diagnostic { line: Some(*line), column: *column, ..base(Some(file), message.clone()) }]
            }
            CliError::Data { file, errors } => errors.iter().map(|e| base(file.as_deref(), e.to_string())).collect(),
            CliError::Domain { file, message } => vec![base(file.as_deref(), message.clone())],
            CliError::Tamper { file, .. } => vec![base(Some(file), self.to_string())],
            CliError::EmptyDirectory(dir) => vec![base(Some(dir), "no fit files found".into())],
            CliError::Usage { message } => vec![base(None, message.clone())],
        }
    }
}

/// A single machine-readable line on stderr.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub level: &'static str,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    pub fn warning(kind: &'static str, file: Option<&Path>, message: impl Into<String>) -> Self {
        Diagnostic {
            level: "warning",
            kind,
            file: file.map(|p| p.display().to_string()),
            line: None,
            column: None,
            message: message.into(),
        }
    }

    pub fn emit(&self) {
        eprintln!("{}", serde_json::to_string(self).expect("diagnostic serialises"));
    }
}
