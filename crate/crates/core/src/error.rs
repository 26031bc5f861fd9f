use thiserror::Error;

/// Errors raised across the simulator and calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid Hilbert layout: {0}")]
    InvalidLayout(String),
    #[error("truncation too small: need resonator_dim >= {required}, have {available}")]
    TruncationTooSmall { required: usize, available: usize },
    #[error("non-finite entries in input")]
    NonFinite,
    #[error("layout mismatch: {left} vs {right}")]
    LayoutMismatch { left: String, right: String },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("operator is not Hermitian (max deviation {0:.3e})")]
    NonHermitian(f64),
    #[error("operator is not unitary (max deviation {0:.3e})")]
    NonUnitary(f64),
    #[error("potential minimization failed: {0}")]
    MinimizationFailed(String),
    #[error("potential has {0} local minima in one period; single-minimum model does not apply")]
    MultipleMinima(usize),
    #[error("finite-difference derivative did not converge (order {order}, spread {spread:.3e})")]
    DerivativeUnstable { order: usize, spread: f64 },
    #[error("bracket [{lo}, {hi}] does not straddle a sign change")]
    NoSignChange { lo: f64, hi: f64 },
    #[error("fit diverged: {0}")]
    FitDiverged(String),
    #[error("fit converged but RMS residual {rms:.4e} exceeds threshold {threshold:.4e}")]
    ReportedWithResidual { rms: f64, threshold: f64 },
    #[error("RK4 step too large: halving dt changed the result by {change:.3e} in trace distance")]
    StepTooLarge { change: f64 },
    #[error("time {t} ns outside pulse window [0, {duration}] ns")]
    OutOfWindow { t: f64, duration: f64 },
    #[error("total Kerr shift {shift_mhz:.3} MHz exceeds drive linewidth {linewidth_mhz:.3} MHz")]
    ShiftExceedsLinewidth { shift_mhz: f64, linewidth_mhz: f64 },
    #[error("spectral peaks unresolved: {0}")]
    PeaksUnresolved(String),
    #[error("Poisson fit poor: RMS weight residual {rms:.4} above {threshold:.4}")]
    PoissonFitPoor { rms: f64, threshold: f64 },
    #[error("conditional window n < {cutoff:.3} reaches resonator_dim {dim}")]
    ConditionWindowTooWide { cutoff: f64, dim: usize },
    #[error("Wigner grids differ: {0}")]
    GridMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, used in machine-readable reports.
    pub fn name(&self) -> &'static str {
        match self {
            Error::InvalidLayout(_) => "InvalidLayout",
            Error::TruncationTooSmall { .. } => "TruncationTooSmall",
            Error::NonFinite => "NonFinite",
            Error::LayoutMismatch { .. } => "LayoutMismatch",
            Error::InvalidState(_) => "InvalidState",
            Error::NonHermitian(_) => "NonHermitian",
            Error::NonUnitary(_) => "NonUnitary",
            Error::MinimizationFailed(_) => "MinimizationFailed",
            Error::MultipleMinima(_) => "MultipleMinima",
            Error::DerivativeUnstable { .. } => "DerivativeUnstable",
            Error::NoSignChange { .. } => "NoSignChange",
            Error::FitDiverged(_) => "FitDiverged",
            Error::ReportedWithResidual { .. } => "ReportedWithResidual",
            Error::StepTooLarge { .. } => "StepTooLarge",
            Error::OutOfWindow { .. } => "OutOfWindow",
            Error::ShiftExceedsLinewidth { .. } => "ShiftExceedsLinewidth",
            Error::PeaksUnresolved(_) => "PeaksUnresolved",
            Error::PoissonFitPoor { .. } => "PoissonFitPoor",
            Error::ConditionWindowTooWide { .. } => "ConditionWindowTooWide",
            Error::GridMismatch(_) => "GridMismatch",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }

    /// Module that raised the error, for CLI failure reports.
    pub fn module(&self) -> &'static str {
        match self {
            Error::InvalidLayout(_)
            | Error::TruncationTooSmall { .. }
            | Error::NonFinite
            | Error::LayoutMismatch { .. }
            | Error::InvalidState(_)
            | Error::NonUnitary(_) => "hilbert",
            Error::MinimizationFailed(_)
            | Error::MultipleMinima(_)
            | Error::DerivativeUnstable { .. }
            | Error::NoSignChange { .. } => "snail",
            Error::NonHermitian(_) | Error::StepTooLarge { .. } | Error::OutOfWindow { .. } => "dynamics",
            Error::ShiftExceedsLinewidth { .. }
            | Error::PeaksUnresolved(_)
            | Error::PoissonFitPoor { .. }
            | Error::ConditionWindowTooWide { .. } => "protocols",
            Error::GridMismatch(_) => "tomography",
            Error::FitDiverged(_) | Error::ReportedWithResidual { .. } => "fit",
            Error::InvalidInput(_) => "input",
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
