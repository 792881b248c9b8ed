//! Posterior draws and temperature reconstruction.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::hyper::HyperPoint;
use super::marginal::marginal_by_index;
use crate::error::{Error, Result};
use crate::model::LatentGaussianModel;
use crate::timeseries::Year;

#[derive(Clone, Debug, Default)]
pub struct Draws {
    /// Index into the hyper points of the component each draw came from.
    pub component: Vec<usize>,
    pub psi: Vec<Vec<f64>>,
    /// Latent draws restricted to `indices`.
    pub theta: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
}

impl Draws {
    pub fn len(&self) -> usize {
        self.component.len()
    }

    pub fn is_empty(&self) -> bool {
        self.component.is_empty()
    }

    /// Draws of one selected parameter.
    pub fn column(&self, position: usize) -> Vec<f64> {
        self.theta.iter().map(|t| t[position]).collect()
    }
}

/// Draws (θ, ψ): components by weight, then θ from that component's
/// Gaussian through its sparse factor, shifted and rescaled coordinatewise to
/// the component mean and variance. `subset` limits the stored θ entries.
pub fn sample_posterior(
    points: &[HyperPoint],
    n: usize,
    seed: u64,
    subset: Option<&[usize]>,
) -> Result<Draws> {
    if points.is_empty() {
        return Err(Error::invalid("no hyperparameter points to sample from"));
    }
    let dim = points[0].conditional.mode.len();
    let indices: Vec<usize> = subset.map_or_else(|| (0..dim).collect(), <[usize]>::to_vec);
    if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
        return Err(Error::UnknownParameter(format!("index {bad}")));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut cumulative = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for p in points {
        acc += p.weight;
        cumulative.push(acc);
    }
    let component: Vec<usize> = (0..n)
        .map(|_| {
            let u: f64 = master.random::<f64>() * acc;
            cumulative.partition_point(|c| *c <= u).min(points.len() - 1)
        })
        .collect();
    // one stream per component so the θ draws do not depend on interleaving
    let mut streams: Vec<ChaCha8Rng> = (0..points.len())
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k as u64 + 1);
            r
        })
        .collect();
    let mut draws = Draws {
        component: component.clone(),
        psi: Vec::with_capacity(n),
        theta: Vec::with_capacity(n),
        indices: indices.clone(),
    };
    let scales: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            p.variances
                .iter()
                .zip(&p.component_variance)
                .map(|(v, c)| if *v > 0.0 { (c / v).sqrt() } else { 0.0 })
                .collect()
        })
        .collect();
    let mut z = Vec::new();
    let mut dev = vec![0.0; dim];
    for &k in &component {
        let p = &points[k];
        let rng = &mut streams[k];
        z.clear();
        z.extend((0..p.conditional.inner.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        p.conditional.deviation(&mut z, &mut dev);
        draws.psi.push(p.psi.clone());
        draws
            .theta
            .push(indices.iter().map(|&i| p.component_mean[i] + dev[i] * scales[k][i]).collect());
    }
    Ok(draws)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReconstructionRow {
    pub year: Year,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Per-year posterior mean, sd and central 95% band of `T_t`.
pub fn reconstruct(lgm: &LatentGaussianModel, points: &[HyperPoint]) -> Result<Vec<ReconstructionRow>> {
    let layout = lgm
        .layout
        .as_ref()
        .ok_or_else(|| Error::invalid("reconstruction needs a hierarchical model layout"))?;
    layout
        .years
        .years()
        .enumerate()
        .map(|(t, year)| {
            let m = marginal_by_index(points, t)?;
            Ok(ReconstructionRow {
                year,
                mean: m.mean(),
                sd: m.sd(),
                q025: m.quantile(0.025)?,
                q975: m.quantile(0.975)?,
            })
        })
        .collect()
}

pub fn write_reconstruction_csv<W: Write>(out: W, rows: &[ReconstructionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["year", "mean", "sd", "q025", "q975"])?;
    for r in rows {
        w.write_record([
            r.year.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.q025.to_string(),
            r.q975.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
