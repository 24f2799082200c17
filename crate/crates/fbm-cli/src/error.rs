//! CLI-level errors and their machine-readable rendering.
//!
//! Every failure exits nonzero and prints a single JSON line to stderr with a
//! stable `category` field. Config validation collects every problem before
//! exiting so a bad config is fixed in one round trip.

use fbm::FbmError;

#[derive(Debug)]
pub enum CliError {
    /// Semantic config problems, all of them at once.
    Validation(Vec<String>),
    /// Anything surfaced by the library (solvers, IO, serialization, ...).
    Fbm(FbmError),
    /// CLI-local failures with an explicit category.
    Msg {
        category: &'static str,
        message: String,
    },
}

impl CliError {
    pub fn msg(category: &'static str, message: impl Into<String>) -> CliError {
        CliError::Msg {
            category,
            message: message.into(),
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let value = match self {
            CliError::Validation(errors) => serde_json::json!({
                "category": "config",
                "message": format!(
                    "{} validation error{}",
                    errors.len(),
                    if errors.len() == 1 { "" } else { "s" }
                ),
                "errors": errors,
            }),
            CliError::Fbm(e) => serde_json::json!({
                "category": e.category(),
                "message": e.to_string(),
            }),
            CliError::Msg { category, message } => serde_json::json!({
                "category": category,
                "message": message,
            }),
        };
        value.to_string()
    }
}

impl From<FbmError> for CliError {
    fn from(e: FbmError) -> CliError {
        CliError::Fbm(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Fbm(FbmError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Fbm(FbmError::Serde(e))
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> CliError {
        CliError::msg("format", e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> CliError {
        CliError::msg("io", e.to_string())
    }
}
