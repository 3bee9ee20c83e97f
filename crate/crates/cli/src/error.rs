use std::fmt;

/// A failure reported as one `error code=... stage=... message=...` line.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub stage: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, stage: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            stage,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new("config", "config", message)
    }

    pub fn exit_code(&self) -> i32 {
        if self.code == "config" {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message.replace(['\n', '\r'], " ");
        write!(
            f,
            "error code={} stage={} message={}",
            self.code, self.stage, msg
        )
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> StageExt<T> for Result<T, soyscan::Error> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(e.code(), stage, e.to_string()))
    }
}

impl<T> StageExt<T> for std::io::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new("io", stage, e.to_string()))
    }
}

impl<T> StageExt<T> for csv::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new("csv", stage, e.to_string()))
    }
}

impl<T> StageExt<T> for serde_json::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new("json", stage, e.to_string()))
    }
}
