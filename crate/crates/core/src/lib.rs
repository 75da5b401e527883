//! Uniform-design subsampling for double machine learning.
//!
//! Pipeline: standardize and rotate covariates ([`preprocess`]), build a
//! low-discrepancy lattice skeleton ([`design`]), map it through the
//! marginal ECDFs and match one treated and one control unit per anchor
//! ([`matching`]), then run cross-fitted AIPW on the selected rows ([`dml`]).

pub mod data;
pub mod bench;
pub mod design;
pub mod dgp;
pub mod dml;
pub mod error;
pub mod matching;
pub mod nuisance;
pub mod preprocess;
pub mod stats;

pub use data::{Dataset, Truth};
pub use error::{Error, Result};
pub use dml::{DmlOptions, EstimateReport, MethodTag, SeedBundle, UdParams};
pub use nuisance::NuisanceConfig;
