//! Train small classifiers, simulate model theft, and test whether a suspect
//! model was derived from a protected one by measuring how much it leaks
//! about the protected training set.

// `!(x > 0.0)` is how this crate rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod data;
pub mod error;
pub mod mia;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod shadow;
pub mod stats;
pub mod steal;
pub mod verify;

pub use data::Dataset;
pub use error::{Error, OracleError, ParseError, Result};
pub use nn::{Activation, MlpModel};
pub use oracle::{LocalOracle, PredictionOracle};
pub use shadow::{build_farm, ShadowFarm, ShadowSpec};
pub use verify::{Attack, Verdict, Verifier, VerifyMode};
