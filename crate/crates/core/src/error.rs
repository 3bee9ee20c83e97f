use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("overlapping plot windows {first} and {second}")]
    OverlappingWindows { first: String, second: String },

    #[error("empty frame sequence for plot {plot} row {row} side {side}")]
    EmptySequence { plot: String, row: u8, side: char },

    #[error("no grid neighbour of plot {0} carries a value")]
    NoNeighbours(String),

    #[error("gradient requested for a value that was not recorded on this tape")]
    MissingForward,

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable code used in CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid_input",
            Error::OverlappingWindows { .. } => "overlapping_windows",
            Error::EmptySequence { .. } => "empty_sequence",
            Error::NoNeighbours(_) => "no_neighbours",
            Error::MissingForward => "missing_forward",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
