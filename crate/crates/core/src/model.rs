//! Hierarchical reconstruction models as latent Gaussian models.
//!
//! The latent vector θ holds the temperature process `T_t` (one entry per
//! reconstruction year, in year order), then the process coefficients
//! (β for forcings and intercept, spline coefficients), then the per-nest
//! proxy intercepts and slopes α₀^i, α₁^i. Hyperparameters are log
//! precisions: ψ₀ = ρ₀ for the process noise η and ψ_i = ρ_i for the
//! reduced-proxy noise ε^i.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::ols;
use crate::reduce::ReducedProxy;
use crate::sparse::{SparseSym, SymbolicCholesky};
use crate::splines::SplineBasis;
use crate::timeseries::{ForcingSet, TimeSeries, Year, YearRange, FIRST_YEAR, LAST_YEAR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// Spline baseline without forcings.
    NF,
    /// Linear response to solar, volcanic and greenhouse forcings.
    WF,
    /// Forcings plus a spline term.
    Mixed,
}

impl ModelKind {
    pub fn uses_forcings(self) -> bool {
        matches!(self, ModelKind::WF | ModelKind::Mixed)
    }

    pub fn uses_splines(self) -> bool {
        matches!(self, ModelKind::NF | ModelKind::Mixed)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::NF => "NF",
            ModelKind::WF => "WF",
            ModelKind::Mixed => "Mixed",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nf" => Ok(ModelKind::NF),
            "wf" => Ok(ModelKind::WF),
            "mixed" => Ok(ModelKind::Mixed),
            other => Err(Error::invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Observation precision: fixed, or `exp(ψ_k)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Precision {
    Fixed(f64),
    Hyper(usize),
}

/// One Gaussian observation `y ~ N(η(θ), 1/τ)` with
/// `η = offset + Σ c_j θ_j + c θ_a θ_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub value: f64,
    pub offset: f64,
    pub linear: Vec<(usize, f64)>,
    pub product: Option<(usize, usize, f64)>,
    pub precision: Precision,
}

impl Observation {
    pub fn predictor(&self, theta: &[f64]) -> f64 {
        let mut eta = self.offset;
        for &(j, c) in &self.linear {
            eta += c * theta[j];
        }
        if let Some((a, b, c)) = self.product {
            eta += c * theta[a] * theta[b];
        }
        eta
    }

    /// Calls `f(j, ∂η/∂θ_j)` for every partial derivative (indices may repeat).
    pub fn for_each_partial(&self, theta: &[f64], mut f: impl FnMut(usize, f64)) {
        for &(j, c) in &self.linear {
            f(j, c);
        }
        if let Some((a, b, c)) = self.product {
            f(a, c * theta[b]);
            f(b, c * theta[a]);
        }
    }

    /// Latent indices the predictor depends on.
    pub fn support(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.linear.iter().map(|(j, _)| *j).collect();
        if let Some((a, b, _)) = self.product {
            s.push(a);
            s.push(b);
        }
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Log-gamma prior on a log precision ρ: ρ = log τ with τ ~ Gamma(shape, rate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperSpec {
    pub name: String,
    pub shape: f64,
    pub rate: f64,
    /// Starting value for the mode search.
    pub initial: f64,
}

impl HyperSpec {
    pub fn log_density(&self, rho: f64) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape) + self.shape * rho - self.rate * rho.exp()
    }
}

/// Upper-triangle convention: `(i, j, v)` with `i <= j`; off-diagonal
/// entries stand for both `Q_ij` and `Q_ji`.
pub type Triplet = (usize, usize, f64);

/// Indices of the hierarchical blocks inside θ.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub kind: ModelKind,
    pub years: YearRange,
    /// Process coefficients: intercept, forcings (if any), then splines (if any).
    pub beta: Range<usize>,
    pub forcing_count: usize,
    pub spline_count: usize,
    /// Per modeled nest: (nest index, θ index of α₀, θ index of α₁).
    pub alpha: Vec<(usize, usize, usize)>,
}

impl Layout {
    pub fn t_index(&self, year: Year) -> Option<usize> {
        self.years
            .contains(year)
            .then(|| (year - self.years.start) as usize)
    }
}

/// Gaussian latent field θ | ψ ~ N(0, Q(ψ)⁻¹) with
/// `Q(ψ) = Q_fixed + Σ_k exp(ψ_k) Q_k`, observed through [`Observation`]s.
#[derive(Clone, Debug)]
pub struct LatentGaussianModel {
    pub names: Vec<String>,
    pub hypers: Vec<HyperSpec>,
    pub prior_fixed: Vec<Triplet>,
    /// `prior_scaled[k]` is scaled by `exp(ψ_k)`; may be empty.
    pub prior_scaled: Vec<Vec<Triplet>>,
    pub observations: Vec<Observation>,
    /// Starting point for the conditional-mode search.
    pub initial_theta: Vec<f64>,
    pub layout: Option<Layout>,
}

impl LatentGaussianModel {
    /// Empty model over named latent parameters and hyperparameters.
    pub fn new(names: Vec<String>, hypers: Vec<HyperSpec>) -> Self {
        let n = names.len();
        let k = hypers.len();
        Self {
            names,
            hypers,
            prior_fixed: Vec::new(),
            prior_scaled: vec![Vec::new(); k],
            observations: Vec::new(),
            initial_theta: vec![0.0; n],
            layout: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn hyper_dim(&self) -> usize {
        self.hypers.len()
    }

    pub fn parameter_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn initial_hyper(&self) -> Vec<f64> {
        self.hypers.iter().map(|h| h.initial).collect()
    }

    /// Checks indices and triplet orientation.
    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.prior_scaled.len() != self.hyper_dim() {
            return Err(Error::Dimension(format!(
                "{} scaled prior blocks for {} hyperparameters",
                self.prior_scaled.len(),
                self.hyper_dim()
            )));
        }
        if self.initial_theta.len() != n {
            return Err(Error::Dimension("initial θ has the wrong length".into()));
        }
        let all = self.prior_fixed.iter().chain(self.prior_scaled.iter().flatten());
        for &(i, j, v) in all {
            if i > j || j >= n || !v.is_finite() {
                return Err(Error::invalid(format!("bad prior entry ({i}, {j}, {v})")));
            }
        }
        for (k, o) in self.observations.iter().enumerate() {
            if !o.value.is_finite() || o.support().iter().any(|&j| j >= n) {
                return Err(Error::invalid(format!("observation {k} is malformed")));
            }
            match o.precision {
                Precision::Fixed(t) if !(t > 0.0) => {
                    return Err(Error::invalid(format!("observation {k} has precision {t}")))
                }
                Precision::Hyper(h) if h >= self.hyper_dim() => {
                    return Err(Error::invalid(format!("observation {k} uses hyperparameter {h}")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn check_dims(&self, theta: &[f64], psi: &[f64]) -> Result<()> {
        if theta.len() != self.dim() || psi.len() != self.hyper_dim() {
            return Err(Error::Dimension(format!(
                "expected θ of length {} and ψ of length {}, got {} and {}",
                self.dim(),
                self.hyper_dim(),
                theta.len(),
                psi.len()
            )));
        }
        Ok(())
    }

    pub fn observation_precision(&self, obs: &Observation, psi: &[f64]) -> f64 {
        match obs.precision {
            Precision::Fixed(t) => t,
            Precision::Hyper(k) => psi[k].exp(),
        }
    }

    pub fn prior_pattern(&self) -> SparseSym {
        let entries = self
            .prior_fixed
            .iter()
            .chain(self.prior_scaled.iter().flatten())
            .map(|&(i, j, _)| (i, j));
        SparseSym::with_pattern(self.dim(), entries)
    }

    /// Pattern of the conditional precision: prior plus every pair of
    /// latent entries sharing an observation.
    pub fn posterior_pattern(&self) -> SparseSym {
        let mut entries: Vec<(usize, usize)> = self
            .prior_fixed
            .iter()
            .chain(self.prior_scaled.iter().flatten())
            .map(|&(i, j, _)| (i, j))
            .collect();
        for o in &self.observations {
            let s = o.support();
            for (a, &i) in s.iter().enumerate() {
                for &j in &s[a..] {
                    entries.push((i, j));
                }
            }
        }
        SparseSym::with_pattern(self.dim(), entries)
    }

    /// Overwrites `q` (which must contain the prior pattern) with Q(ψ).
    pub fn fill_prior(&self, q: &mut SparseSym, psi: &[f64]) {
        q.clear();
        for &(i, j, v) in &self.prior_fixed {
            q.add(i, j, v);
        }
        for (k, block) in self.prior_scaled.iter().enumerate() {
            let s = psi[k].exp();
            for &(i, j, v) in block {
                q.add(i, j, s * v);
            }
        }
    }

    pub fn prior_precision(&self, psi: &[f64]) -> SparseSym {
        let mut q = self.prior_pattern();
        self.fill_prior(&mut q, psi);
        q
    }

    pub fn log_hyper_prior(&self, psi: &[f64]) -> f64 {
        self.hypers.iter().zip(psi).map(|(h, &r)| h.log_density(r)).sum()
    }

    pub fn log_likelihood(&self, theta: &[f64], psi: &[f64]) -> Result<f64> {
        self.check_dims(theta, psi)?;
        Ok(self
            .observations
            .iter()
            .map(|o| {
                let tau = self.observation_precision(o, psi);
                let r = o.value - o.predictor(theta);
                0.5 * tau.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * tau * r * r
            })
            .sum())
    }

    /// log N(θ; 0, Q(ψ)⁻¹).
    pub fn log_prior_theta(&self, theta: &[f64], psi: &[f64]) -> Result<f64> {
        self.check_dims(theta, psi)?;
        let q = self.prior_precision(psi);
        let factor = SymbolicCholesky::analyze(&q)
            .factor(&q)
            .map_err(|j| Error::Singular(format!("prior precision at `{}`", self.names[j])))?;
        Ok(gaussian_log_density(factor.log_det(), q.quad_form(theta), self.dim()))
    }

    /// log p(ψ) + log p(θ | ψ) + log p(y | θ, ψ).
    pub fn log_joint(&self, theta: &[f64], psi: &[f64]) -> Result<f64> {
        Ok(self.log_hyper_prior(psi) + self.log_prior_theta(theta, psi)? + self.log_likelihood(theta, psi)?)
    }

    /// Number of process and proxy coefficients (everything except `T`).
    pub fn fixed_effect_count(&self) -> usize {
        match &self.layout {
            Some(l) => l.beta.len() + 2 * l.alpha.len(),
            None => self.dim(),
        }
    }

    /// Structured description for audit trails and fixtures.
    pub fn summary(&self, settings: &ModelSettings) -> serde_json::Value {
        let fixed: Vec<&str> = match &self.layout {
            Some(l) => self.names[l.beta.start..].iter().map(String::as_str).collect(),
            None => self.names.iter().map(String::as_str).collect(),
        };
        serde_json::json!({
            "kind": self.layout.as_ref().map(|l| l.kind.to_string()),
            "years": self.layout.as_ref().map(|l| [l.years.start, l.years.end]),
            "latent_dim": self.dim(),
            "fixed_effect_count": self.fixed_effect_count(),
            "fixed_effects": fixed,
            "hyperparameters": self.hypers,
            "observation_count": self.observations.len(),
            "priors": {
                "coefficient_variance": settings.coefficient_variance,
                "calibration_variance": settings.calibration_variance,
                "hyper_shape": settings.hyper_shape,
                "hyper_rate": settings.hyper_rate,
            },
        })
    }
}

/// Log density of N(0, Q⁻¹) given log|Q| and the quadratic form.
pub fn gaussian_log_density(log_det: f64, quad: f64, dim: usize) -> f64 {
    0.5 * log_det - 0.5 * dim as f64 * (2.0 * PI).ln() - 0.5 * quad
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    /// Reconstruction years (the latent `T` grid).
    pub years: YearRange,
    /// Prior variance of every α, β and spline coefficient.
    pub coefficient_variance: f64,
    /// Fixed observation variance of calibration temperatures.
    pub calibration_variance: f64,
    pub hyper_shape: f64,
    pub hyper_rate: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            years: YearRange {
                start: FIRST_YEAR,
                end: LAST_YEAR,
            },
            coefficient_variance: 3.0,
            calibration_variance: 1e-4,
            hyper_shape: 1.0,
            hyper_rate: 1e-20,
        }
    }
}

/// Builds the model from reduced proxies; see [`assemble_series`].
pub fn assemble(
    kind: ModelKind,
    rps: &[ReducedProxy],
    forcings: Option<&ForcingSet>,
    basis: Option<&SplineBasis>,
    calibration: &TimeSeries,
    settings: &ModelSettings,
) -> Result<LatentGaussianModel> {
    let series: Vec<(usize, &TimeSeries)> = rps.iter().map(|r| (r.nest_index, &r.series)).collect();
    assemble_series(kind, &series, forcings, basis, calibration, settings)
}

/// Builds the model from `(nest index, reduced proxy series)` pairs. Series
/// are ordered by nest index, so the result does not depend on input order.
pub fn assemble_series(
    kind: ModelKind,
    series: &[(usize, &TimeSeries)],
    forcings: Option<&ForcingSet>,
    basis: Option<&SplineBasis>,
    calibration: &TimeSeries,
    settings: &ModelSettings,
) -> Result<LatentGaussianModel> {
    if series.is_empty() {
        return Err(Error::invalid("model needs at least one reduced proxy"));
    }
    let years = settings.years;
    let mut rps: Vec<(usize, &TimeSeries)> = series.to_vec();
    rps.sort_by_key(|(i, _)| *i);
    if rps.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("two reduced proxies share a nest index"));
    }
    let mut gaps = Vec::new();
    for (i, s) in &rps {
        if !years.covers(&s.range()) {
            gaps.push(format!("nest {i}: {} outside {years}", s.range()));
        }
    }
    if !years.covers(&calibration.range()) {
        gaps.push(format!("calibration: {} outside {years}", calibration.range()));
    }
    if !gaps.is_empty() {
        return Err(Error::Coverage(gaps.join("; ")));
    }

    // process design F over the latent years
    let ny = years.len();
    let mut cols: Vec<(String, Vec<f64>)> = vec![("beta0".into(), vec![1.0; ny])];
    let forcing_count = if kind.uses_forcings() {
        let f = forcings.ok_or_else(|| Error::invalid(format!("model {kind} requires forcings")))?;
        if !f.range().covers(&years) {
            return Err(Error::Coverage(format!(
                "forcings cover {} but the reconstruction needs {years}",
                f.range()
            )));
        }
        for (name, s) in ["beta_solar", "beta_volcanic", "beta_co2"].iter().zip(f.covariates()) {
            cols.push((name.to_string(), s.dense(years)?));
        }
        3
    } else {
        0
    };
    let spline_count = if kind.uses_splines() {
        let b = basis.ok_or_else(|| Error::invalid(format!("model {kind} requires a spline basis")))?;
        if b.grid.len() != ny || b.grid.first() != Some(&f64::from(years.start)) {
            return Err(Error::Dimension(format!(
                "spline basis grid has {} points, the reconstruction {ny} years from {}",
                b.grid.len(),
                years.start
            )));
        }
        let prefix = if kind == ModelKind::NF { "beta_spline" } else { "gamma" };
        for k in 0..b.count {
            cols.push((format!("{prefix}[{}]", k + 1), b.matrix.column(k).iter().copied().collect()));
        }
        b.count
    } else {
        0
    };
    let p = cols.len();
    let f = DMatrix::from_fn(ny, p, |t, j| cols[j].1[t]);

    if kind == ModelKind::WF {
        let rows: Vec<usize> = calibration
            .observed()
            .map(|(y, _)| (y - years.start) as usize)
            .collect();
        let fc = DMatrix::from_fn(rows.len(), p, |r, j| f[(rows[r], j)]);
        let rank = fc.clone().svd(false, false).rank(1e-10 * fc.amax().max(1.0));
        if rank < p {
            return Err(Error::Singular(format!(
                "process design has rank {rank} < {p} on the calibration window"
            )));
        }
    }

    let beta = ny..ny + p;
    let mut names: Vec<String> = years.years().map(|y| format!("T[{y}]")).collect();
    names.extend(cols.iter().map(|(n, _)| n.clone()));
    let mut alpha = Vec::with_capacity(rps.len());
    for (i, _) in &rps {
        let a0 = names.len();
        names.push(format!("alpha0[{i}]"));
        names.push(format!("alpha1[{i}]"));
        alpha.push((*i, a0, a0 + 1));
    }

    let hyper = |name: String, initial: f64| HyperSpec {
        name,
        shape: settings.hyper_shape,
        rate: settings.hyper_rate,
        initial,
    };
    let mut hypers = vec![hyper("rho0".into(), 0.0)];
    hypers.extend(rps.iter().map(|(i, _)| hyper(format!("rho[{i}]"), 0.0)));

    let mut lgm = LatentGaussianModel::new(names, hypers);
    let layout = Layout {
        kind,
        years,
        beta: beta.clone(),
        forcing_count,
        spline_count,
        alpha: alpha.clone(),
    };

    // T | β ~ N(Fβ, τ₀⁻¹ I) as a joint precision scaled by τ₀
    let eta_block = &mut lgm.prior_scaled[0];
    for t in 0..ny {
        eta_block.push((t, t, 1.0));
        for j in 0..p {
            if f[(t, j)] != 0.0 {
                eta_block.push((t, ny + j, -f[(t, j)]));
            }
        }
    }
    let ftf = f.transpose() * &f;
    for j in 0..p {
        for i in 0..=j {
            if ftf[(i, j)] != 0.0 {
                eta_block.push((ny + i, ny + j, ftf[(i, j)]));
            }
        }
    }
    let coef_precision = 1.0 / settings.coefficient_variance;
    for j in beta.start..lgm.dim() {
        lgm.prior_fixed.push((j, j, coef_precision));
    }

    let cal_precision = 1.0 / settings.calibration_variance;
    for (y, v) in calibration.observed() {
        lgm.observations.push(Observation {
            value: v,
            offset: 0.0,
            linear: vec![((y - years.start) as usize, 1.0)],
            product: None,
            precision: Precision::Fixed(cal_precision),
        });
    }
    for (k, (_, s)) in rps.iter().enumerate() {
        let (_, a0, a1) = alpha[k];
        for (y, v) in s.observed() {
            let t = (y - years.start) as usize;
            lgm.observations.push(Observation {
                value: v,
                offset: 0.0,
                linear: vec![(a0, 1.0)],
                product: Some((a1, t, 1.0)),
                precision: Precision::Hyper(k + 1),
            });
        }
    }

    initialize(&mut lgm, &layout, &f, calibration, &rps);
    lgm.layout = Some(layout);
    lgm.validate()?;
    Ok(lgm)
}

/// Starting values: β by least squares of the calibration temperatures on F,
/// T from the fitted process, α by least squares of each RP on that T.
fn initialize(
    lgm: &mut LatentGaussianModel,
    layout: &Layout,
    f: &DMatrix<f64>,
    calibration: &TimeSeries,
    rps: &[(usize, &TimeSeries)],
) {
    let cal: Vec<(usize, f64)> = calibration
        .observed()
        .filter_map(|(y, v)| layout.t_index(y).map(|t| (t, v)))
        .collect();
    let fc = DMatrix::from_fn(cal.len(), f.ncols(), |r, j| f[(cal[r].0, j)]);
    let yc = DVector::from_iterator(cal.len(), cal.iter().map(|(_, v)| *v));
    let (beta, resid_var) = match ols(&fc, &yc) {
        Ok(fit) if cal.len() > 1 => {
            let var = fit.rss / cal.len() as f64;
            (fit.coef, var)
        }
        _ => (DVector::zeros(f.ncols()), 1.0),
    };
    let mut t_init = f * &beta;
    for &(t, v) in &cal {
        t_init[t] = v;
    }
    let theta = &mut lgm.initial_theta;
    theta[..t_init.len()].copy_from_slice(t_init.as_slice());
    theta[layout.beta.clone()].copy_from_slice(beta.as_slice());
    lgm.hypers[0].initial = -resid_var.max(1e-4).ln();
    for (k, (_, s)) in rps.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s
            .observed()
            .filter_map(|(y, v)| layout.t_index(y).map(|t| (t_init[t], v)))
            .collect();
        let x = DMatrix::from_fn(pts.len(), 2, |r, j| if j == 0 { 1.0 } else { pts[r].0 });
        let y = DVector::from_iterator(pts.len(), pts.iter().map(|(_, v)| *v));
        let (a0, a1, var) = match ols(&x, &y) {
            Ok(fit) if pts.len() > 2 && fit.coef[1].abs() > 1e-8 => {
                (fit.coef[0], fit.coef[1], fit.rss / pts.len() as f64)
            }
            _ => (0.0, 1.0, 1.0),
        };
        let (_, i0, i1) = layout.alpha[k];
        theta[i0] = a0;
        theta[i1] = a1;
        lgm.hypers[k + 1].initial = -var.max(1e-4).ln();
    }
}
