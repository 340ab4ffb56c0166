//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the imputation engine.
#[derive(Debug, Error)]
pub enum MdamError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fabricated weights require at least one unit nonrespondent")]
    NoUnitNonrespondents,

    #[error("respondent weights exceed N: fabricated weight constant would be {constant}")]
    RespondentWeightsExceedPopulation { constant: f64 },

    #[error("no observed donors for variable `{variable}`")]
    NoObservedDonors { variable: String },

    #[error("empty response level {level} in logistic fit")]
    EmptyResponseLevel { level: usize },

    #[error("zero effective degrees of freedom in linear fit")]
    ZeroDegreesOfFreedom,

    #[error("covariance not positive semidefinite after jitter")]
    NonPsdCovariance,

    #[error("nonlinear solver failed to converge: best residual {best_residual}")]
    SolverNoConvergence {
        best_residual: f64,
        best_point: Vec<f64>,
    },

    #[error("margin variance too large for variable `{variable}`: sampled totals stayed negative after {attempts} redraws")]
    MarginVarianceTooLarge { variable: String, attempts: usize },

    #[error("zero adjustment denominator for level {level} with nonzero numerator {numerator}")]
    ZeroAdjustmentDenominator { level: usize, numerator: f64 },

    #[error("non-finite adjustment factor for level {level}")]
    NonFiniteAdjustment { level: usize },

    #[error("infeasible adjustment: entire probability vector clamped to zero for unit {unit}")]
    InfeasibleAdjustment { unit: usize },

    #[error("inestimable log-odds: no respondents in cell (x2={level}, x1={cell})")]
    InestimableLogOdds { level: usize, cell: usize },

    #[error("hot deck donor pool empty: no respondents available")]
    EmptyDonorPool,

    #[error("imputation model failed for variable `{variable}` (cycle {cycle}): {source}")]
    FitFailed {
        variable: String,
        cycle: usize,
        #[source]
        source: Box<MdamError>,
    },

    #[error("margin imputation failed in completed dataset {dataset}: {source}")]
    DatasetFailed {
        dataset: usize,
        #[source]
        source: Box<MdamError>,
    },

    #[error("too many failed replicates: {failed} of {total} exceeds the {cap_percent}% cap")]
    TooManyFailedReplicates {
        failed: usize,
        total: usize,
        cap_percent: f64,
    },
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, MdamError>;
