use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("switching times decrease at index {index} ({previous} > {value})")]
    MonotonicityViolation { index: usize, previous: f64, value: f64 },
    #[error("switching time {value} at index {index} lies outside [0, {horizon}]")]
    OutOfHorizon { index: usize, value: f64, horizon: f64 },
    #[error("mode sequence has {modes} entries but the schedule has {switches} switching times")]
    LengthMismatch { modes: usize, switches: usize },
    #[error("mode {mode} does not exist (system has {count} modes)")]
    UnknownMode { mode: usize, count: usize },
    #[error("no reset map registered for transition {from} -> {to}")]
    MissingReset { from: usize, to: usize },
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch { what: String, expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    BadParams(String),
    #[error("state norm {norm:e} exceeded the blow-up bound at t = {time} (segment {segment})")]
    BlowUp { segment: usize, time: f64, norm: f64 },
    #[error("non-finite state at t = {time} (segment {segment})")]
    NonFiniteState { segment: usize, time: f64 },
    #[error("time {0} is outside the trajectory domain")]
    OutOfDomain(f64),
    #[error("trajectory and adjoint were computed on different schedules or meshes")]
    ScheduleMismatch,
    #[error("chain property defect {defect:e} exceeds tolerance {tolerance:e} for {from} -> {via} -> {to}")]
    ChainPropertyViolation { from: usize, via: usize, to: usize, defect: f64, tolerance: f64 },
    #[error("insertion at t = {time} is infeasible: {reason}")]
    InfeasibleInsertion { time: f64, reason: String },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable class name used in CLI reports.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidHorizon(_) => "InvalidHorizon",
            Error::MonotonicityViolation { .. } => "MonotonicityViolation",
            Error::OutOfHorizon { .. } => "OutOfHorizon",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::UnknownMode { .. } => "UnknownMode",
            Error::MissingReset { .. } => "MissingReset",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::BadParams(_) => "BadParams",
            Error::BlowUp { .. } => "BlowUp",
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::OutOfDomain(_) => "OutOfDomain",
            Error::ScheduleMismatch => "ScheduleMismatch",
            Error::ChainPropertyViolation { .. } => "ChainPropertyViolation",
            Error::InfeasibleInsertion { .. } => "InfeasibleInsertion",
            Error::UnknownScenario(_) => "UnknownScenario",
            Error::Config(_) => "ConfigError",
        }
    }

    /// True for failures of the numerical pipeline (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. }
                | Error::NonFiniteState { .. }
                | Error::ChainPropertyViolation { .. }
                | Error::InfeasibleInsertion { .. }
                | Error::ScheduleMismatch
        )
    }
}
