//! Gibbs sampler for model WF with one reduced proxy, kept as a reference
//! for the nested Laplace engine. Every full conditional is Gaussian or
//! gamma, so the scan needs no tuning.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{mean, ols, quantile_sorted};
use crate::model::ModelSettings;
use crate::reduce::ReducedProxy;
use crate::timeseries::{ForcingSet, TimeSeries};

/// Process coefficients of model WF, in latent-layout order.
pub const BETA_NAMES: [&str; 4] = ["beta0", "beta_solar", "beta_volcanic", "beta_co2"];

/// Post-burn-in draws, one row of `names.len()` values per kept iteration.
#[derive(Clone, Debug)]
pub struct Chain {
    pub names: Vec<String>,
    pub draws: Vec<f64>,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Chain {
    /// Number of stored draws.
    pub fn len(&self) -> usize {
        self.iterations - self.burn_in
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn column_at(&self, index: usize) -> Vec<f64> {
        let p = self.names.len();
        self.draws.iter().skip(index).step_by(p).copied().collect()
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.column_at(self.index_of(name)?))
    }
}

/// Draws `N(Q⁻¹b, Q⁻¹)`.
fn gaussian_draw(q: DMatrix<f64>, b: DVector<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let n = b.len();
    let chol = q
        .cholesky()
        .ok_or_else(|| Error::Numerical("coefficient full conditional is not positive definite".into()))?;
    let mean = chol.solve(&b);
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let dev = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok(mean + dev)
}

fn gamma_draw(shape: f64, rate: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(format!("gamma full conditional: {e}")))?;
    Ok(g.sample(rng))
}

pub fn gibbs_wf(
    rp: &ReducedProxy,
    forcings: &ForcingSet,
    calibration: &TimeSeries,
    settings: &ModelSettings,
    iters: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Chain> {
    gibbs_wf_series(rp.nest_index, &rp.series, forcings, calibration, settings, iters, burn_in, seed)
}

/// Systematic scan over (α, β), then T year by year (the T block is
/// conditionally independent across years), then both precisions.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_wf_series(
    nest: usize,
    rp: &TimeSeries,
    forcings: &ForcingSet,
    calibration: &TimeSeries,
    settings: &ModelSettings,
    iters: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Chain> {
    if iters == 0 {
        return Err(Error::invalid("the chain needs at least one iteration"));
    }
    if burn_in >= iters {
        return Err(Error::invalid(format!("burn-in {burn_in} leaves no draws out of {iters}")));
    }
    let years = settings.years;
    if !years.covers(&rp.range()) || !years.covers(&calibration.range()) {
        return Err(Error::Coverage(format!(
            "proxy {} or calibration {} outside {years}",
            rp.range(),
            calibration.range()
        )));
    }
    if !forcings.range().covers(&years) {
        return Err(Error::Coverage(format!("forcings cover {} but need {years}", forcings.range())));
    }
    let ny = years.len();
    let covs: Vec<Vec<f64>> = forcings
        .covariates()
        .iter()
        .map(|s| s.dense(years))
        .collect::<Result<_>>()?;
    let f = DMatrix::from_fn(ny, 4, |t, j| if j == 0 { 1.0 } else { covs[j - 1][t] });
    let ftf = f.transpose() * &f;
    let cal: Vec<Option<f64>> = years.years().map(|y| calibration.get(y)).collect();
    let obs: Vec<Option<f64>> = years.years().map(|y| rp.get(y)).collect();
    let n_obs = obs.iter().flatten().count();
    if n_obs < 2 {
        return Err(Error::invalid("reduced proxy needs at least two observed years"));
    }
    let kappa = 1.0 / settings.calibration_variance;
    let prior_prec = 1.0 / settings.coefficient_variance;
    let (a, b) = (settings.hyper_shape, settings.hyper_rate);

    // starting point: calibration regression for β, RP regression for α
    let cal_rows: Vec<usize> = (0..ny).filter(|&t| cal[t].is_some()).collect();
    let fc = DMatrix::from_fn(cal_rows.len(), 4, |r, j| f[(cal_rows[r], j)]);
    let yc = DVector::from_iterator(cal_rows.len(), cal_rows.iter().map(|&t| cal[t].unwrap_or(0.0)));
    let mut beta = ols(&fc, &yc).map(|fit| fit.coef).unwrap_or_else(|_| DVector::zeros(4));
    let mut temp: Vec<f64> = (0..ny).map(|t| cal[t].unwrap_or_else(|| f.row(t).dot(&beta.transpose()))).collect();
    let (mut tau0, mut tau1) = (1.0, 1.0);

    let mut names: Vec<String> = years.years().map(|y| format!("T[{y}]")).collect();
    names.extend(BETA_NAMES.iter().map(|s| s.to_string()));
    names.push(format!("alpha0[{nest}]"));
    names.push(format!("alpha1[{nest}]"));
    names.push("sigma2_eta".into());
    names.push(format!("sigma2[{nest}]"));
    let p = names.len();
    let mut draws = Vec::with_capacity((iters - burn_in) * p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for it in 0..iters {
        // α | T, τ₁
        let (mut s_t, mut s_tt, mut s_r, mut s_tr) = (0.0, 0.0, 0.0, 0.0);
        for (t, r) in obs.iter().enumerate() {
            if let Some(r) = r {
                s_t += temp[t];
                s_tt += temp[t] * temp[t];
                s_r += r;
                s_tr += temp[t] * r;
            }
        }
        let q = DMatrix::from_row_slice(
            2,
            2,
            &[tau1 * n_obs as f64 + prior_prec, tau1 * s_t, tau1 * s_t, tau1 * s_tt + prior_prec],
        );
        let alpha = gaussian_draw(q, DVector::from_vec(vec![tau1 * s_r, tau1 * s_tr]), &mut rng)?;

        // β | T, τ₀
        let ft = f.transpose() * DVector::from_column_slice(&temp);
        let q = &ftf * tau0 + DMatrix::identity(4, 4) * prior_prec;
        beta = gaussian_draw(q, ft * tau0, &mut rng)?;

        // T | α, β, τ
        let mu = &f * &beta;
        let (a0, a1) = (alpha[0], alpha[1]);
        for t in 0..ny {
            let mut prec = tau0;
            let mut lin = tau0 * mu[t];
            if let Some(c) = cal[t] {
                prec += kappa;
                lin += kappa * c;
            }
            if let Some(r) = obs[t] {
                prec += tau1 * a1 * a1;
                lin += tau1 * a1 * (r - a0);
            }
            let z: f64 = rng.sample(StandardNormal);
            temp[t] = lin / prec + z / prec.sqrt();
        }

        // precisions
        let ss0: f64 = (0..ny).map(|t| (temp[t] - mu[t]).powi(2)).sum();
        tau0 = gamma_draw(a + ny as f64 / 2.0, b + ss0 / 2.0, &mut rng)?;
        let ss1: f64 = obs
            .iter()
            .enumerate()
            .filter_map(|(t, r)| r.map(|r| (r - a0 - a1 * temp[t]).powi(2)))
            .sum();
        tau1 = gamma_draw(a + n_obs as f64 / 2.0, b + ss1 / 2.0, &mut rng)?;

        if it >= burn_in {
            draws.extend_from_slice(&temp);
            draws.extend(beta.iter());
            draws.push(a0);
            draws.push(a1);
            draws.push(1.0 / tau0);
            draws.push(1.0 / tau1);
        }
    }
    Ok(Chain {
        names,
        draws,
        iterations: iters,
        burn_in,
        seed,
    })
}

/// Independent chains, one per seed, run concurrently.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_wf_chains(
    nest: usize,
    rp: &TimeSeries,
    forcings: &ForcingSet,
    calibration: &TimeSeries,
    settings: &ModelSettings,
    iters: usize,
    burn_in: usize,
    seeds: &[u64],
) -> Result<Vec<Chain>> {
    seeds
        .par_iter()
        .map(|&s| gibbs_wf_series(nest, rp, forcings, calibration, settings, iters, burn_in, s))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    /// `None` for a constant chain, where autocorrelation is undefined.
    pub ess: Option<f64>,
}

/// Effective sample size from autocorrelations summed in adjacent pairs up
/// to the first non-positive pair (initial positive sequence).
pub fn effective_sample_size(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let m = mean(x);
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    let acov = |k: usize| d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let c0 = acov(0);
    if !(c0 > 0.0) || c0 <= 1e-28 * m.abs().max(1.0).powi(2) {
        return None;
    }
    let mut sum = 0.0;
    let mut k = 0;
    while k + 1 < n {
        let pair = (acov(k) + acov(k + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    Some(n as f64 / tau)
}

pub fn summarize(name: &str, x: &[f64]) -> Result<ParamSummary> {
    if x.is_empty() {
        return Err(Error::invalid(format!("no draws for `{name}`")));
    }
    let m = mean(x);
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ParamSummary {
        name: name.to_string(),
        mean: m,
        sd,
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
        ess: effective_sample_size(x),
    })
}

/// Summaries of every stored parameter, in chain order.
pub fn chain_summary(chain: &Chain) -> Result<Vec<ParamSummary>> {
    if chain.is_empty() || chain.draws.is_empty() {
        return Err(Error::invalid("chain has no draws after burn-in"));
    }
    (0..chain.names.len())
        .into_par_iter()
        .map(|i| summarize(&chain.names[i], &chain.column_at(i)))
        .collect()
}

/// Gelman–Rubin potential scale reduction over equal-length chains.
pub fn potential_scale_reduction(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::invalid("scale reduction needs at least two chains"));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("chains must have equal length ≥ 2"));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let between = n as f64 * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    let within = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if within == 0.0 {
        return Ok(if between == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let pooled = (n - 1) as f64 / n as f64 * within + between / n as f64;
    Ok((pooled / within).sqrt())
}

/// `(iteration, parameter, value)` rows for the named parameters.
pub fn write_chain_csv<W: Write>(out: W, chain: &Chain, names: &[&str]) -> Result<()> {
    let idx: Vec<usize> = names.iter().map(|n| chain.index_of(n)).collect::<Result<_>>()?;
    let p = chain.names.len();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "parameter", "value"])?;
    for (k, row) in chain.draws.chunks(p).enumerate() {
        let iteration = (chain.burn_in + k + 1).to_string();
        for &i in &idx {
            w.write_record([iteration.as_str(), chain.names[i].as_str(), row[i].to_string().as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(out: W, summaries: &[ParamSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "mean", "sd", "q025", "q975", "ess"])?;
    for s in summaries {
        w.write_record([
            s.name.clone(),
            s.mean.to_string(),
            s.sd.to_string(),
            s.q025.to_string(),
            s.q975.to_string(),
            s.ess.map_or_else(String::new, |e| e.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Gaussian kernel density estimate on `grid` points over mean ± `width` sd,
/// with Silverman's bandwidth.
pub fn kernel_density(x: &[f64], grid: usize, width: f64) -> Vec<(f64, f64)> {
    let n = x.len() as f64;
    let m = mean(x);
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    if !(sd > 0.0) || grid < 2 {
        return vec![(m, f64::INFINITY)];
    }
    let h = 1.06 * sd * n.powf(-0.2);
    let norm = 1.0 / (n * h * (2.0 * PI).sqrt());
    (0..grid)
        .map(|i| {
            let g = m - width * sd + 2.0 * width * sd * i as f64 / (grid - 1) as f64;
            let d = x.iter().map(|v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum::<f64>() * norm;
            (g, d)
        })
        .collect()
}

/// `(parameter, grid_value, density)` rows, shaped like the marginal export
/// of the nested Laplace engine.
pub fn write_density_csv<W: Write>(out: W, chain: &Chain, names: &[&str], grid: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "grid_value", "density"])?;
    for name in names {
        for (g, d) in kernel_density(&chain.column(name)?, grid, 5.0) {
            w.write_record([name.to_string(), g.to_string(), d.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
