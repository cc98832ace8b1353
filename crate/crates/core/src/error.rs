use thiserror::Error;

/// Errors produced anywhere in the receiver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid microwave field: {0}")]
    InvalidField(String),

    #[error("invalid atom parameters: {0}")]
    InvalidParams(String),

    #[error(
        "envelope approximation needs a dominant reference bin: reference amplitude {reference} \
         does not exceed the largest other amplitude {max_other}"
    )]
    ApproximationPremise { reference: f64, max_other: f64 },

    #[error("steady-state system is numerically singular (smallest pivot {pivot:.3e})")]
    SingularSystem { pivot: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch normalization in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("malformed frame header: {0}")]
    MalformedHeader(String),

    #[error("payload of {bits} bits exceeds the {max}-bit framing limit")]
    PayloadTooLarge { bits: usize, max: usize },

    #[error("malformed dataset file: {0}")]
    MalformedFile(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("too few records: need at least {need}, got {got}")]
    TooFewRecords { need: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Reads a whole file, naming the path on failure.
pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a whole file, naming the path on failure.
pub fn write_file(path: &std::path::Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}
