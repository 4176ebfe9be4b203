use std::fmt;

/// A failure reported as a single JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn new(kind: &'static str, message: impl fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string().replace('\n', " "),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

pub trait Tag<T> {
    fn tag(self, kind: &'static str) -> Result<T>;
}

impl<T, E: fmt::Display> Tag<T> for std::result::Result<T, E> {
    fn tag(self, kind: &'static str) -> Result<T> {
        self.map_err(|e| CliError::new(kind, e))
    }
}
