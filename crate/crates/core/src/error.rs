use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report.
///
/// Variant names double as the machine-readable error codes printed by the
/// CLI (see [`Error::code`]), so renaming a variant is a breaking change.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("channel name too long ({0} bytes, max 255)")]
    ChannelNameTooLong(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("resonance at {freq_hz} Hz lies outside the sweep [{start_hz}, {stop_hz}] Hz")]
    SweepTooNarrow {
        freq_hz: f64,
        start_hz: f64,
        stop_hz: f64,
    },
    #[error("no dip below the detection threshold")]
    NoDipsFound,
    #[error("expected dips at {0} Hz and {1} Hz are closer than the merge tolerance")]
    DegenerateResonances(f64, f64),
    #[error("fitted dip at {0} Hz cannot be assigned to a unique NV axis")]
    AmbiguousAssignment(f64),
    #[error("fit did not converge (rms residual {0})")]
    NoConvergence(f64),
    #[error("fit residual {rms} exceeds {limit}")]
    PoorFit { rms: f64, limit: f64 },
    #[error("NV axis matrix is singular (|det| = {0})")]
    SingularAxes(f64),
    #[error("bias field violates the sign margin: {0}")]
    BiasMarginViolated(String),

    #[error("evaluation point lies on a current segment (distance {0} m)")]
    PointOnSegment(f64),
    #[error("trace leaves the sheet plane: {0}")]
    OutOfPlaneTrace(String),
    #[error("standoff {standoff} m must exceed the source depth {depth} m")]
    StandoffBelowDepth { standoff: f64, depth: f64 },
    #[error("cutoff {cutoff} rad/m exceeds the Nyquist wavenumber {nyquist} rad/m")]
    CutoffAboveNyquist { cutoff: f64, nyquist: f64 },
    #[error("profile is not wire-like (normalized residual {residual}, limit {limit})")]
    NotWireLike { residual: f64, limit: f64 },

    #[error("too few samples: {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("series covers {0} whole drive periods, need at least 2")]
    TooFewPeriods(usize),
    #[error("seed pixel ({col}, {row}) is below the tracing threshold")]
    SeedBelowThreshold { col: usize, row: usize },
    #[error("masked pixels present: {0}")]
    MaskedPixels(String),
}

impl Error {
    /// Stable code string, e.g. `"NoDipsFound"`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::NonFinite(_) => "NonFinite",
            Error::GridMismatch(_) => "GridMismatch",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Format(_) => "Format",
            Error::ChannelNameTooLong(_) => "ChannelNameTooLong",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
            Error::SweepTooNarrow { .. } => "SweepTooNarrow",
            Error::NoDipsFound => "NoDipsFound",
            Error::DegenerateResonances(..) => "DegenerateResonances",
            Error::AmbiguousAssignment(_) => "AmbiguousAssignment",
            Error::NoConvergence(_) => "NoConvergence",
            Error::PoorFit { .. } => "PoorFit",
            Error::SingularAxes(_) => "SingularAxes",
            Error::BiasMarginViolated(_) => "BiasMarginViolated",
            Error::PointOnSegment(_) => "PointOnSegment",
            Error::OutOfPlaneTrace(_) => "OutOfPlaneTrace",
            Error::StandoffBelowDepth { .. } => "StandoffBelowDepth",
            Error::CutoffAboveNyquist { .. } => "CutoffAboveNyquist",
            Error::NotWireLike { .. } => "NotWireLike",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::TooFewPeriods(_) => "TooFewPeriods",
            Error::SeedBelowThreshold { .. } => "SeedBelowThreshold",
            Error::MaskedPixels(_) => "MaskedPixels",
        }
    }
}
