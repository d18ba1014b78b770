//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: negative concentration {value}")]
    NegativeConcentration {
        path: String,
        line: usize,
        value: f64,
    },

    #[error("{path}: no data rows")]
    NoDataRows { path: String },

    #[error("duplicate date {date} for site {site}")]
    DuplicateDate { date: String, site: String },

    #[error("site {site} appears with districts {first} and {second}")]
    SiteDistrictConflict {
        site: String,
        first: String,
        second: String,
    },

    #[error("lag {lag} is not smaller than series length {len}")]
    LagTooLarge { lag: usize, len: usize },

    #[error("series have no overlapping dates")]
    NoCalendarOverlap,

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("mean must be positive, got {0}")]
    NonPositiveMean(f64),

    #[error("variance must be nonnegative, got {0}")]
    NegativeVariance(f64),

    #[error("nonpositive sample {0} not representable under a log-normal")]
    NonPositiveSample(f64),

    #[error("spline needs at least {need} distinct values, got {got}")]
    TooFewDistinctValues { need: usize, got: usize },

    #[error("column {index} is constant; cannot standardize")]
    ConstantColumn { index: usize },

    #[error("coincident spline knots at {0}")]
    CoincidentKnots(f64),

    #[error("microenvironment set is empty")]
    EmptyMicroenvironments,

    #[error("activity profile invalid: {0}")]
    InvalidProfile(String),

    #[error("exposure panel has zero total exposure on every day")]
    ZeroTotalExposure,

    #[error("gelman-rubin needs at least 2 chains, got {0}")]
    SingleChain(usize),

    #[error("sampler failed to find a finite starting point after {0} attempts")]
    BadInitialization(usize),

    #[error("λ draws were not retained; rerun with keep_lambda enabled")]
    LambdaDrawsMissing,

    #[error("ambient series has zero variance; attenuation slope undefined")]
    ZeroAmbientVariance,

    #[error("unknown figure selector: {0}")]
    UnknownFigure(String),

    #[error("{0}")]
    Invalid(String),
}
