use std::path::{Path, PathBuf};

use serde::Serialize;

/// Exit code for unreadable or invalid inputs and configuration.
pub const EXIT_INPUT: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip)]
    pub exit: i32,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: "config",
            message: message.into(),
            path: None,
            exit: EXIT_INPUT,
        }
    }

    pub fn with_path(mut self, path: &Path) -> Self {
        self.path = Some(path.to_path_buf());
        self
    }

    /// A library error raised while reading inputs.
    pub fn input(e: handtraj::Error) -> Self {
        Self {
            exit: EXIT_INPUT,
            ..Self::from(e)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<handtraj::Error> for CliError {
    fn from(e: handtraj::Error) -> Self {
        use handtraj::Error as E;
        let (kind, path) = match &e {
            E::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => ("not_found", Some(path.clone())),
            E::Io { path, .. } => ("io", Some(path.clone())),
            E::Json(_) => ("json", None),
            E::Format(_) => ("format", None),
            E::Shape { .. } => ("shape", None),
            E::Validation(_) => ("validation", None),
            E::InvalidInput(_) => ("invalid_input", None),
            E::Degenerate(_) => ("degenerate", None),
        };
        Self {
            kind,
            message: e.to_string(),
            path,
            exit: EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}
