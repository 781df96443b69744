use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("coordinate {value} m is outside the quantization cube of half-width {half_width} m")]
    Range { value: f64, half_width: f64 },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical error at bin {bin}: {reason}")]
    Numerical { bin: usize, reason: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("wav error in {path:?}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
