//! Gaussian-mixture posterior marginals.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use super::hyper::HyperPoint;
use crate::error::{Error, Result};
use crate::model::LatentGaussianModel;

/// Mixture of Gaussians `Σ w_k N(μ_k, σ_k²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMarginal {
    /// (mean, variance, weight) per component; weights sum to 1.
    pub components: Vec<(f64, f64, f64)>,
}

impl PosteriorMarginal {
    pub fn new(components: Vec<(f64, f64, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if components.iter().any(|&(m, v, w)| !m.is_finite() || !(v > 0.0) || !(w >= 0.0)) {
            return Err(Error::invalid("mixture components need finite means, positive variances"));
        }
        let total: f64 = components.iter().map(|c| c.2).sum();
        if !(total > 0.0) {
            return Err(Error::invalid("mixture weights sum to zero"));
        }
        Ok(Self {
            components: components.into_iter().map(|(m, v, w)| (m, v, w / total)).collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|(m, _, w)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.components.iter().map(|(m, v, w)| w * (v + (m - mu).powi(2))).sum()
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn density(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|(m, v, w)| w * (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|&(m, v, w)| w * Normal::new(m, v.sqrt()).map_or(0.0, |n| n.cdf(x)))
            .sum()
    }

    /// Inverse cdf by safeguarded Newton iteration.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("quantile level {p} outside (0, 1)")));
        }
        let spread = self.components.iter().map(|c| c.1.sqrt()).fold(0.0, f64::max);
        let lo0 = self.components.iter().map(|c| c.0).fold(f64::INFINITY, f64::min) - 40.0 * spread;
        let hi0 = self.components.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max) + 40.0 * spread;
        let (mut lo, mut hi) = (lo0, hi0);
        let mut x = self.mean();
        for _ in 0..200 {
            let f = self.cdf(x) - p;
            if f.abs() <= 1e-14 {
                return Ok(x);
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = self.density(x);
            let newton = x - f / d;
            x = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-15 * (1.0 + x.abs()) {
                return Ok(x);
            }
        }
        Ok(x)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.2;
            if u < acc {
                pick = k;
                break;
            }
        }
        let (m, v, _) = self.components[pick];
        let z: f64 = StandardNormal.sample(rng);
        m + v.sqrt() * z
    }

    /// `(value, density)` on `n` equally spaced points over mean ± `width`·sd.
    pub fn grid(&self, n: usize, width: f64) -> Vec<(f64, f64)> {
        let (mu, sd) = (self.mean(), self.sd());
        let (lo, hi) = (mu - width * sd, mu + width * sd);
        (0..n)
            .map(|i| {
                let x = if n == 1 { mu } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
                (x, self.density(x))
            })
            .collect()
    }
}

/// Mixture marginal of the latent parameter with index `id`.
pub fn marginal_by_index(points: &[HyperPoint], id: usize) -> Result<PosteriorMarginal> {
    let comps = points
        .iter()
        .map(|p| {
            p.component_mean
                .get(id)
                .map(|m| (*m, p.component_variance[id], p.weight))
                .ok_or_else(|| Error::UnknownParameter(format!("index {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if comps.iter().any(|c| !(c.1 > 0.0)) {
        // product coefficients are point values in each component; summarize
        // their integrated distribution by its first two moments
        let total: f64 = comps.iter().map(|c| c.2).sum();
        let mean = comps.iter().map(|(m, _, w)| w * m).sum::<f64>() / total;
        let var = comps.iter().map(|(m, v, w)| w * (v + (m - mean).powi(2))).sum::<f64>() / total;
        if !(var > 0.0) {
            return Err(Error::Numerical(format!("parameter {id} has no posterior spread")));
        }
        return PosteriorMarginal::new(vec![(mean, var, 1.0)]);
    }
    PosteriorMarginal::new(comps)
}

/// Mixture marginal of a named latent parameter.
pub fn marginal(lgm: &LatentGaussianModel, points: &[HyperPoint], name: &str) -> Result<PosteriorMarginal> {
    marginal_by_index(points, lgm.parameter_index(name)?)
}

/// Weighted posterior mean and sd of hyperparameter `k` and of its variance `exp(−ψ_k)`.
pub fn hyper_summary(points: &[HyperPoint], k: usize) -> (f64, f64, f64) {
    let mean: f64 = points.iter().map(|p| p.weight * p.psi[k]).sum();
    let var: f64 = points.iter().map(|p| p.weight * (p.psi[k] - mean).powi(2)).sum();
    let sigma2: f64 = points.iter().map(|p| p.weight * (-p.psi[k]).exp()).sum();
    (mean, var.sqrt(), sigma2)
}
