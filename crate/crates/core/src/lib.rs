//! Rényi-type continued fractions with parameter `N >= 2`.
//!
//! The map `R_N(x) = N/(1-x) mod 1` on `[0, 1)`, its invariant measure, the
//! Markov chain of past states driving the digit process, certified
//! Gauss-Kuzmin-Lévy type bounds, and ψ-mixing coefficients.

// `!(a > b)` checks double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod chain;
pub mod error;
pub mod expansion;
pub mod levy;
pub mod measures;
pub mod mixing;
pub mod quadrature;
pub mod report;

pub use bounds::Bounds;
pub use chain::{AtomicDistribution, ChainState, PropagationSettings, Resolution, TailPolicy};
pub use error::{Error, Result};
pub use expansion::{
    BranchComposition, DigitBlock, Expansion, ExpansionParams, Interval, SquarePoint,
};
pub use measures::{ConditionalMeasure, ExtendedMeasure, InvariantMeasure};
