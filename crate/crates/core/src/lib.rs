//! Design-based variance estimation for blocked, matched-pairs and hybrid
//! randomized experiments.
//!
//! The numeric core is generic over [`Scalar`], implemented for `f64`, `f32`
//! and exact rationals. The aliases below name the usual instantiations.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod oracle;
pub mod scalar;
pub mod simulate;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Exact rational scalar.
pub type Rational = num_rational::BigRational;

pub type Table = data::ExperimentTable<f64>;
pub type Summary = data::ExperimentSummary<f64>;
pub type Report = estimators::EstimateReport<f64>;
pub type Science = oracle::ScienceTable<f64>;
pub type Population = oracle::StrataPopulation<f64>;

pub type ExactTable = data::ExperimentTable<Rational>;
pub type ExactSummary = data::ExperimentSummary<Rational>;
pub type ExactScience = oracle::ScienceTable<Rational>;
pub type ExactPopulation = oracle::StrataPopulation<Rational>;
