use thiserror::Error;

/// Errors raised by the toolkit. Every variant maps onto one CLI exit class.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what} = {value} is outside its domain ({expected})")]
    Domain {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("the Renyi parameter must satisfy N >= 2, got {0}")]
    InvalidParameter(u64),

    #[error("digit {digit} is not admissible for N = {n} (digits must be >= N)")]
    InadmissibleDigit { digit: u64, n: u32 },

    #[error("x = 1 has an infinite digit")]
    InfiniteDigit,

    #[error("cylinder mass {mass:e} underflows")]
    DegenerateCylinder { mass: f64 },

    #[error("block mass {mass:e} is below the underflow floor")]
    Underflow { mass: f64 },

    #[error("atom budget exhausted: {requested} atoms requested, budget is {budget}")]
    AtomBudget { requested: usize, budget: usize },

    #[error("adaptive quadrature exceeded its budget of {budget} evaluations")]
    QuadratureBudget { budget: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_unit(what: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::Domain {
            what,
            value,
            expected: "[0, 1]",
        })
    }
}
