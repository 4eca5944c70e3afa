use thiserror::Error;

/// Every failure the pipeline can report. `code()` gives the stable,
/// machine-parsable identifier used by the CLI error reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("spectrum has no dominant peak (max {max:.3e} < 10 x median {median:.3e})")]
    SpectrumFlat { max: f64, median: f64 },
    #[error("band [{lo}, {hi}] reaches the Nyquist frequency {nyquist}")]
    BandOutOfRange { lo: f64, hi: f64, nyquist: f64 },
    #[error("series too short: {0}")]
    TooShort(String),
    #[error("requested time {t} lies outside the valid range [{lo}, {hi}]")]
    OutOfValidRange { t: f64, lo: f64, hi: f64 },
    #[error("averaging window around sample {index} leaves the sample range")]
    WindowOutOfRange { index: usize },
    #[error("library has no linear term for channel {0}")]
    MissingLinearTerm(usize),
    #[error("incompatible problems: {0}")]
    IncompatibleProblems(String),
    #[error("solver did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("support is empty")]
    EmptySupport,
    #[error("relative residual {residual:.4e} exceeds tolerance {tolerance:.4e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },
    #[error("assembled stiffness {0} is not positive")]
    NonPositiveStiffness(f64),
    #[error("integration blew up at t = {t}")]
    BlowUp { t: f64 },
    #[error("Newton iteration diverged (residual {residual:.3e})")]
    NewtonDiverged { residual: f64 },
    #[error("could not seed the branch: {0}")]
    SeedFailed(String),
    #[error("point set is empty")]
    EmptySet,
    #[error("reference axis '{0}' has zero range")]
    DegenerateAxis(&'static str),
    #[error("rank {k_hat} exceeds min(p, k) = {max}")]
    RankTooLarge { k_hat: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "DEGENERATE_INPUT",
            Error::SpectrumFlat { .. } => "SPECTRUM_FLAT",
            Error::BandOutOfRange { .. } => "BAND_OUT_OF_RANGE",
            Error::TooShort(_) => "TOO_SHORT",
            Error::OutOfValidRange { .. } => "OUT_OF_VALID_RANGE",
            Error::WindowOutOfRange { .. } => "WINDOW_OUT_OF_RANGE",
            Error::MissingLinearTerm(_) => "MISSING_LINEAR_TERM",
            Error::IncompatibleProblems(_) => "INCOMPATIBLE_PROBLEMS",
            Error::NotConverged { .. } => "NOT_CONVERGED",
            Error::EmptySupport => "EMPTY_SUPPORT",
            Error::ResidualTooLarge { .. } => "RESIDUAL_TOO_LARGE",
            Error::NonPositiveStiffness(_) => "NON_POSITIVE_STIFFNESS",
            Error::BlowUp { .. } => "BLOW_UP",
            Error::NewtonDiverged { .. } => "NEWTON_DIVERGED",
            Error::SeedFailed(_) => "SEED_FAILED",
            Error::EmptySet => "EMPTY_SET",
            Error::DegenerateAxis(_) => "DEGENERATE_AXIS",
            Error::RankTooLarge { .. } => "RANK_TOO_LARGE",
            Error::DimensionMismatch(_) => "DIMENSION_MISMATCH",
            Error::InvalidInput(_) => "INVALID_INPUT",
            Error::Io { .. } => "IO",
            Error::Parse(_) => "PARSE",
        }
    }

    /// Process exit status for the CLI: 2 for bad input, 3 for numerical failure.
    pub fn exit_status(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse(_)
            | Error::InvalidInput(_)
            | Error::DimensionMismatch(_)
            | Error::DegenerateInput(_)
            | Error::TooShort(_)
            | Error::BandOutOfRange { .. }
            | Error::RankTooLarge { .. }
            | Error::EmptySet
            | Error::IncompatibleProblems(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
