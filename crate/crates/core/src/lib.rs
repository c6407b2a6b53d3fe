//! Uncertainty estimators for small neural regressors, uncertainty-quality
//! metrics, and a four-level acceptance test harness whose binary verdicts
//! are combined through logic trees.

pub mod aggregate;
pub mod criteria;
pub mod datasel;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod metrics;
pub mod odd;
pub mod report;
pub mod nn;
pub mod rng;
pub mod suite;
pub mod synthdata;

pub use error::{Error, Result};
