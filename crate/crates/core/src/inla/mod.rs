//! Nested Laplace approximation for [`LatentGaussianModel`]s.
//!
//! Coefficients that multiply another latent (the proxy slopes) are
//! integrated together with the hyperparameters; given those, the model is
//! linear and θ | φ, y is exactly Gaussian. Marginals are Gaussian mixtures
//! over the integration points; the simplified-Laplace skewness correction
//! is not applied.

pub mod conditional;
pub mod hyper;
pub mod marginal;
pub mod sample;

pub use conditional::{gaussian_conditional, log_hyper_posterior, Conditional, Engine};
pub use hyper::{explore_hyper, explore_with, factorial_corners, ExploreConfig, Exploration, HyperPoint, Strategy};
pub use marginal::{hyper_summary, marginal, marginal_by_index, PosteriorMarginal};
pub use sample::{reconstruct, sample_posterior, write_reconstruction_csv, Draws, ReconstructionRow};

use std::io::Write;

use crate::error::Result;
use crate::model::LatentGaussianModel;

/// Writes `(parameter, grid_value, density)` rows for the named parameters.
pub fn write_marginals_csv<W: Write>(
    out: W,
    lgm: &LatentGaussianModel,
    points: &[HyperPoint],
    names: &[&str],
    grid: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "grid_value", "density"])?;
    for name in names {
        let m = marginal(lgm, points, name)?;
        for (x, d) in m.grid(grid, 5.0) {
            w.write_record([name.to_string(), x.to_string(), d.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
