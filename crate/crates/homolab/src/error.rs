use thiserror::Error;

/// Errors surfaced by every layer of the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {constraint}")]
    InvalidParameter {
        name: &'static str,
        value: String,
        constraint: &'static str,
    },

    #[error("solver failed to reach tolerance {tol:e} after {iterations} iterations (last relative residual {last:e})")]
    SolverFailure {
        tol: f64,
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("right-hand side mean {mean:e} exceeds {bound:e}: discretization is inconsistent with a zero-mean solve")]
    DiscretizationInconsistency { mean: f64, bound: f64 },

    #[error("simulation blew up at step {step} (state {state})")]
    SimulationBlowup { step: usize, state: String },

    #[error("truncation error {error:e} exceeds 1% of the value {value:e}; enlarge the summation radius")]
    EnlargeRadius { error: f64, value: f64 },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, value: impl std::fmt::Display, constraint: &'static str) -> Self {
        Error::InvalidParameter {
            name,
            value: value.to_string(),
            constraint,
        }
    }
}

/// Fails with an invalid-parameter error unless `ok` holds.
pub(crate) fn ensure(ok: bool, name: &'static str, value: impl std::fmt::Display, constraint: &'static str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(name, value, constraint))
    }
}
