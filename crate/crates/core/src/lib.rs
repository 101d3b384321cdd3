//! Bayesian surface-reflectance retrieval for VSWIR imaging spectroscopy.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod prior;
pub mod mcmc;
pub mod oe;
pub mod pipeline;
pub mod posterior;
mod special;
pub mod synth;

pub use error::{Result, RetrievalError};
pub use linalg::SpdMatrix;
pub use model::{AtmLookupTable, Boundary, ForwardModel, Geometry, LinearSubmodel, StateVector, WavelengthGrid};
pub use prior::{GaussianPrior, MixtureComponent, NoiseModel, ObsCovariance};
pub use mcmc::{Chain, McmcConfig, ReflProposal};
pub use oe::{OeOptions, OeResult};
