//! Bayesian hierarchical reconstruction of an annual temperature series from
//! noisy proxy panels, with a nested-Laplace inference engine.

pub mod error;
pub mod inla;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod pseudoproxy;
pub mod reduce;
pub mod scoring;
pub mod sparse;
pub mod splines;
pub mod timeseries;

pub use error::{Error, Result};
