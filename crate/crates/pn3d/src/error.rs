use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// usage/config problems, data problems, and numeric divergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch too small for batchnorm: {0} samples per channel (need >= 2)")]
    BatchTooSmall(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate skeleton: mean head-root distance {0} below 1e-9")]
    DegenerateSkeleton(f64),

    #[error("projection domain error: nonpositive depth {depth} at frame {frame}, joint {joint}")]
    ProjectionDomain { frame: usize, joint: usize, depth: f64 },

    #[error("alignment degenerate: centered target rank < 2")]
    AlignmentDegenerate,

    #[error("orthonormalization conditioning: condition estimate {0:.3e} above 1e6")]
    IllConditioned(f64),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("stage ordering error: {0}")]
    StageOrder(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code class for the CLI: 2 usage, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Divergence(_) => 4,
            _ => 3,
        }
    }
}
