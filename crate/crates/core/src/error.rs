//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A column declared in the schema is missing from the input file.
    #[error("schema error: column '{column}' not found in input")]
    Schema { column: String },

    /// A cell could not be parsed; `row` is the 1-based data row number.
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    /// Input passed parsing but violates a frame invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A requested quantity is outside its admissible range.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// A design or information matrix is rank deficient where full rank is required.
    #[error("rank error: {0}")]
    Rank(String),

    /// An iterative fit exhausted its iteration budget. `best` carries the
    /// last iterate so callers can inspect how far the fit got.
    #[error("convergence error in {context} after {iterations} iterations")]
    Convergence {
        context: String,
        iterations: usize,
        best: Vec<f64>,
    },

    /// Complete or quasi-complete separation in a binary-response fit.
    #[error("separation error: {0}")]
    Separation(String),

    /// A variance or scale estimate degenerated to the point the requested
    /// quantity is undefined.
    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    /// Too many bootstrap replications failed to refit.
    #[error("bootstrap error: {0}")]
    Bootstrap(String),

    /// Caller violated an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A multi-stage estimator failed; `stage` names the step.
    #[error("stage '{stage}' failed: {source}")]
    Pipeline {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
