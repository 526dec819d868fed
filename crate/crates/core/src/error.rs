use thiserror::Error;

/// Everything that can go wrong between reading a dataset and emitting a report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("unbalanced treatment: {treated} treated vs {control} control units")]
    UnbalancedTreatment { treated: usize, control: usize },
    #[error("bad pair {pair_id}: {reason}")]
    BadPair { pair_id: u64, reason: String },
    #[error("missing pairs: {0}")]
    MissingPairs(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("invalid observation {index}: {reason}")]
    InvalidObservation { index: usize, reason: String },
    #[error("odd number of units ({0}); matching needs an even count")]
    OddCount(usize),
    #[error("invalid quantile index {0}; expected a value in [0.01, 0.99]")]
    InvalidTau(f64),
    #[error("invalid quantile grid: {0}")]
    InvalidGrid(String),
    #[error("weights sum to zero")]
    ZeroTotalWeight,
    #[error("bad sieve specification: {0}")]
    BadSpec(String),
    #[error("singular design: condition number {condition:e} exceeds {threshold:e}")]
    SingularDesign { condition: f64, threshold: f64 },
    #[error("leverage of unit {index} is {leverage}, leave-one-out residual undefined")]
    LeverageOne { index: usize, leverage: f64 },
    #[error("no candidate basis could be scored")]
    AllCandidatesFailed,
    #[error("{got} bootstrap draws; at least {needed} required")]
    TooFewDraws { got: usize, needed: usize },
    #[error("bootstrap standard error is zero")]
    ZeroSe,
    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bootstrap replicate {b} failed: {source}")]
    Replicate {
        b: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("monte carlo repetition {rep} failed: {source}")]
    Repetition {
        rep: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse grouping used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    /// Name of the variant, for user-facing messages.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyInput => "EmptyInput",
            Error::UnbalancedTreatment { .. } => "UnbalancedTreatment",
            Error::BadPair { .. } => "BadPair",
            Error::MissingPairs(_) => "MissingPairs",
            Error::Parse { .. } => "Parse",
            Error::InvalidObservation { .. } => "InvalidObservation",
            Error::OddCount(_) => "OddCount",
            Error::InvalidTau(_) => "InvalidTau",
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::ZeroTotalWeight => "ZeroTotalWeight",
            Error::BadSpec(_) => "BadSpec",
            Error::SingularDesign { .. } => "SingularDesign",
            Error::LeverageOne { .. } => "LeverageOne",
            Error::AllCandidatesFailed => "AllCandidatesFailed",
            Error::TooFewDraws { .. } => "TooFewDraws",
            Error::ZeroSe => "ZeroSe",
            Error::QuadratureFailure(_) => "QuadratureFailure",
            Error::Config(_) => "Config",
            Error::Replicate { source, .. } | Error::Repetition { source, .. } => source.kind(),
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidTau(_) | Error::InvalidGrid(_) | Error::BadSpec(_) => {
                ErrorClass::Config
            }
            Error::EmptyInput
            | Error::UnbalancedTreatment { .. }
            | Error::BadPair { .. }
            | Error::MissingPairs(_)
            | Error::Parse { .. }
            | Error::InvalidObservation { .. }
            | Error::OddCount(_)
            | Error::Io(_)
            | Error::Csv(_) => ErrorClass::Data,
            Error::ZeroTotalWeight
            | Error::SingularDesign { .. }
            | Error::LeverageOne { .. }
            | Error::AllCandidatesFailed
            | Error::TooFewDraws { .. }
            | Error::ZeroSe
            | Error::QuadratureFailure(_) => ErrorClass::Numerical,
            Error::Replicate { source, .. } | Error::Repetition { source, .. } => source.class(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
