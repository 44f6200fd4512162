use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Annotation problems carry a stable machine-readable code
    /// (for example `point_out_of_bounds`).
    #[error("annotation error ({code}): {message}")]
    Annotation { code: &'static str, message: String },

    #[error("degenerate encoding: {0}")]
    DegenerateEncoding(String),

    #[error("degenerate similarity map: {0}")]
    DegenerateMap(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("incompatible structure: {0}")]
    Incompatible(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Stable snake_case code for machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Input(_) => "invalid_input",
            Error::Dimension(_) => "dimension_mismatch",
            Error::Annotation { code, .. } => code,
            Error::DegenerateEncoding(_) => "degenerate_encoding",
            Error::DegenerateMap(_) => "degenerate_map",
            Error::EmptyMask(_) => "empty_mask",
            Error::Parameter(_) => "invalid_parameter",
            Error::State(_) => "invalid_state",
            Error::Incompatible(_) => "incompatible",
            Error::Config { .. } => "config_error",
            Error::Protocol(_) => "protocol_error",
            Error::NonFinite(_) => "non_finite",
            Error::Stage { source, .. } => source.code(),
            Error::Io { .. } => "io_error",
            Error::Json(_) => "json_error",
            Error::Image(_) => "image_error",
        }
    }
}
