use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular lattice basis (|det| = {det:e})")]
    SingularBasis { det: f64 },

    #[error("degenerate moire cell: the two layers coincide ({0})")]
    DegenerateMoire(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("hopping table is not Hermitian at lattice offset {offset:?}")]
    NonHermitianTable { offset: [i64; 2] },

    #[error("estimate did not converge: {0}")]
    NonConvergence(String),

    #[error("truncation radius {radius} is smaller than the required {required}")]
    TruncationTooSmall { radius: f64, required: f64 },

    #[error("spectrum bound violated: Gershgorin radius {radius} >= E_b = {bound}")]
    SpectrumBound { radius: f64, bound: f64 },

    #[error("momentum region is unbounded: {dofs} degrees of freedom exceed the cap of {max} (wrapping region)")]
    UnboundedRegion { dofs: usize, max: usize },

    #[error("momentum region wraps around the Brillouin-zone torus; use the circular momentum cutoff or the real-space method instead")]
    WrappingRegion,

    #[error("vector support violation: {0}")]
    SupportViolation(String),

    #[error("reference run is not more accurate than the study run: {0}")]
    WeakReference(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed CSV: {msg}")]
    Csv { path: PathBuf, msg: String },

    #[error("eigendecomposition failed")]
    Eigen,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
