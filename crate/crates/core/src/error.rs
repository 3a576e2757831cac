use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: input has {input} channels, kernel expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },
    #[error("kernel footprint ({span_x}x{span_y}) exceeds grid ({nx}x{ny})")]
    FootprintTooLarge {
        span_x: usize,
        span_y: usize,
        nx: usize,
        ny: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("acceleration factor {r} does not divide grid extent {ny}")]
    CombMismatch { r: usize, ny: usize },
    #[error("covariance matrix is not Hermitian positive definite")]
    SingularCovariance,
    #[error("calibration under-determined: {equations} equations for {unknowns} unknowns (need >= {factor}x)")]
    UnderDetermined {
        equations: usize,
        unknowns: usize,
        factor: usize,
    },
    #[error("calibration matrix is rank deficient and no regularization was requested")]
    RankDeficient,
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("activation masks were computed from different input data (fingerprint mismatch)")]
    FingerprintMismatch,
    #[error("memory budget of {budget} bytes too small: a single row batch needs {required} bytes")]
    BudgetExceeded { budget: usize, required: usize },
    #[error("degenerate statistic: {0}")]
    Degenerate(String),
    #[error("replica {index} produced non-finite output")]
    ReplicaDiverged { index: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
}
