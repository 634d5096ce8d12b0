use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error(
        "pilot capacity exceeded: {needed} pilot rows do not fit a block of {available} symbols"
    )]
    PilotCapacity { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("input is not Hermitian (relative asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(&'static str),

    #[error("fixed point did not converge after {iterations} sweeps (residual {residual:.3e})")]
    FixedPoint { iterations: usize, residual: f64 },

    #[error("bisection bracket failure")]
    BisectionBracket,

    #[error("precoder power {power:.12e} exceeds the budget {budget:.12e}")]
    PowerBudget { power: f64, budget: f64 },

    #[error("MM iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("block index {0} has no posterior (data blocks are 2..=N_b)")]
    Block(usize),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed matrix dump: {0}")]
    Dump(String),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// True when the failure is numerical (as opposed to bad input or IO).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_)
            | Error::Singular(_)
            | Error::FixedPoint { .. }
            | Error::BisectionBracket
            | Error::PowerBudget { .. } => true,
            Error::Iteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
