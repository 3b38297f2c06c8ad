use dynrd::ErrorClass;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Library(#[from] dynrd::Error),

    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Library(e) => match e.class() {
                ErrorClass::Argument => 2,
                ErrorClass::Data => 3,
                ErrorClass::Estimation => 4,
            },
            CliError::Output { .. } => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Library(e) => e.kind(),
            CliError::Output { .. } => "output",
        }
    }

    fn class(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            4 => "estimation",
            _ => "output",
        }
    }

    /// Machine-readable report written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({
            "class": self.class(),
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Library(dynrd::Error::MissingColumn(col)) = self {
            body["column"] = json!(col);
        }
        json!({ "error": body })
    }
}
