//! Synthetic proxy worlds with known truth.
//!
//! Forcings, when not supplied, are stylized: a slow solar sinusoid, sparse
//! negative volcanic spikes and a flat-then-exponential CO₂ ramp. They are
//! not calibrated to any observational record.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, RawForcings};
use crate::model::ModelKind;
use crate::splines::bspline_basis;
use crate::timeseries::{
    transform_forcings, Centering, ForcingSet, ProxyNest, TimeSeries, Year, YearRange, FIRST_YEAR, LAST_YEAR,
    NEST_COUNT,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    /// Process equation generating the truth.
    pub kind: ModelKind,
    /// (β₀, β_solar, β_volcanic, β_CO₂); only β₀ is used by NF.
    pub beta: [f64; 4],
    pub eta_sd: f64,
    /// Spline basis size and coefficient sd of the smooth NF/Mixed component.
    pub spline_count: usize,
    pub gamma_sd: f64,
    pub proxies_per_nest: [usize; NEST_COUNT],
    /// Signal-to-noise ratio sd(a₁T)/sd(noise), drawn uniformly per proxy.
    pub snr_range: (f64, f64),
    /// Probability that a proxy year after the record start is missing.
    pub missing_rate: f64,
    /// Years of the emitted instrumental temperature record.
    pub instrumental: YearRange,
    /// Window the forcings are centered over.
    pub calibration: YearRange,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::WF,
            beta: [0.0, 0.0, -0.4, 2.5],
            eta_sd: 0.15,
            spline_count: 40,
            gamma_sd: 0.3,
            proxies_per_nest: [10; NEST_COUNT],
            snr_range: (0.5, 1.0),
            missing_rate: 0.01,
            instrumental: YearRange { start: 1850, end: LAST_YEAR },
            calibration: YearRange { start: 1900, end: LAST_YEAR },
        }
    }
}

/// One generated proxy: `a0 + a1·T + N(0, noise_sd²)` from `start`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PseudoProxy {
    pub nest: usize,
    pub start: Year,
    pub a0: f64,
    pub a1: f64,
    pub noise_sd: f64,
    pub snr: f64,
    #[serde(skip)]
    pub series: TimeSeries,
}

#[derive(Clone, Debug)]
pub struct PseudoWorld {
    pub config: PseudoConfig,
    pub seed: u64,
    pub truth: TimeSeries,
    pub beta: [f64; 4],
    pub gamma: Vec<f64>,
    pub raw_forcings: RawForcings,
    pub forcings: ForcingSet,
    pub proxies: Vec<PseudoProxy>,
    /// Truth restricted to the instrumental years.
    pub instrumental: TimeSeries,
}

impl PseudoWorld {
    pub fn proxy_series(&self) -> Vec<TimeSeries> {
        self.proxies.iter().map(|p| p.series.clone()).collect()
    }

    /// Writes `proxies.csv`, `forcings.csv`, `temperature.csv` (instrumental
    /// years), `truth.csv` (all years) and `world.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        io::write_proxies(fs::File::create(dir.join("proxies.csv"))?, &self.proxy_series())?;
        io::write_forcings(fs::File::create(dir.join("forcings.csv"))?, &self.raw_forcings)?;
        io::write_temperature(fs::File::create(dir.join("temperature.csv"))?, &self.instrumental)?;
        io::write_temperature(fs::File::create(dir.join("truth.csv"))?, &self.truth)?;
        let meta = serde_json::json!({
            "seed": self.seed,
            "config": self.config,
            "beta": self.beta,
            "gamma": self.gamma,
            "proxies": self.proxies.iter().map(|p| serde_json::json!({
                "id": p.series.name(),
                "nest": p.nest,
                "start": p.start,
                "a0": p.a0,
                "a1": p.a1,
                "noise_sd": p.noise_sd,
                "snr": p.snr,
            })).collect::<Vec<_>>(),
        });
        fs::write(dir.join("world.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

fn validate(cfg: &PseudoConfig) -> Result<()> {
    let (lo, hi) = cfg.snr_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::invalid(format!("SNR range ({lo}, {hi}) must be positive and ordered")));
    }
    if !(cfg.eta_sd >= 0.0 && cfg.gamma_sd >= 0.0) {
        return Err(Error::invalid("process noise and spline sd must be non-negative"));
    }
    if !(0.0..0.5).contains(&cfg.missing_rate) {
        return Err(Error::invalid(format!("missing rate {} outside [0, 0.5)", cfg.missing_rate)));
    }
    let full = YearRange { start: FIRST_YEAR, end: LAST_YEAR };
    if !full.covers(&cfg.instrumental) || !full.covers(&cfg.calibration) {
        return Err(Error::invalid("instrumental and calibration windows must lie in 1..=2000"));
    }
    if cfg.kind.uses_splines() && cfg.spline_count < 4 {
        return Err(Error::invalid("spline truth needs at least 4 basis functions"));
    }
    Ok(())
}

/// Stylized raw forcings over years 1..=2000. At least one eruption falls
/// inside `calibration`, so the forcing design is identifiable there.
pub fn synthetic_forcings(seed: u64, calibration: YearRange) -> Result<RawForcings> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let years = YearRange { start: FIRST_YEAR, end: LAST_YEAR };
    let n = years.len();
    let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let solar: Vec<f64> = years
        .years()
        .map(|y| {
            let t = f64::from(y);
            0.5 * (std::f64::consts::TAU * t / 210.0 + phase).sin() + 0.1 * (std::f64::consts::TAU * t / 11.0).sin()
        })
        .collect();
    // eruptions arrive at rate 1/25 per year with exponential size; each
    // spike fades over three years
    let size = Exp::new(1.0).expect("positive rate");
    let mut volcanic = vec![0.0; n];
    let mut erupt = |t: usize, m: f64| {
        for (k, fade) in [1.0, 0.5, 0.25].iter().enumerate() {
            if t + k < n {
                volcanic[t + k] -= m * fade;
            }
        }
    };
    let mut in_calibration = false;
    for t in 0..n {
        if rng.random::<f64>() < 0.04 {
            erupt(t, size.sample(&mut rng));
            in_calibration |= calibration.contains(FIRST_YEAR + t as Year);
        }
    }
    if !in_calibration {
        let y = rng.random_range(calibration.start..=calibration.end);
        erupt((y - FIRST_YEAR) as usize, size.sample(&mut rng));
    }
    let co2: Vec<f64> = years
        .years()
        .map(|y| {
            let t = f64::from(y);
            if t <= 1800.0 {
                280.0
            } else {
                280.0 + 90.0 * (((t - 1800.0) / 50.0).exp() - 1.0) / (4f64.exp() - 1.0)
            }
        })
        .collect();
    Ok(RawForcings {
        solar: TimeSeries::from_dense("solar", FIRST_YEAR, solar)?,
        volcanic: TimeSeries::from_dense("volcanic", FIRST_YEAR, volcanic)?,
        co2: TimeSeries::from_dense("co2", FIRST_YEAR, co2)?,
    })
}

/// Generates a world with synthetic forcings; see [`generate_with_forcings`].
pub fn generate(config: &PseudoConfig, seed: u64) -> Result<PseudoWorld> {
    generate_with_forcings(config, seed, None)
}

/// Truth from the configured process equation plus IID η, then proxies by
/// the first-level equation. Nest-1 proxies start in year 1; nest-k proxies
/// start uniformly within the nest interval. Every proxy runs to 2000.
pub fn generate_with_forcings(config: &PseudoConfig, seed: u64, raw: Option<RawForcings>) -> Result<PseudoWorld> {
    validate(config)?;
    let years = YearRange { start: FIRST_YEAR, end: LAST_YEAR };
    let raw = match raw {
        Some(r) => r,
        None => synthetic_forcings(seed, config.calibration)?,
    };
    let forcings = transform_forcings(&raw.solar, &raw.volcanic, &raw.co2, config.calibration, Centering::Calibration)?;
    if !forcings.range().covers(&years) {
        return Err(Error::Coverage(format!("forcings cover {}, the world needs {years}", forcings.range())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let b = config.beta;
    let mut mean = vec![b[0]; years.len()];
    if config.kind.uses_forcings() {
        for (j, s) in forcings.covariates().iter().enumerate() {
            for (m, v) in mean.iter_mut().zip(s.dense(years)?) {
                *m += b[j + 1] * v;
            }
        }
    }
    let mut gamma = Vec::new();
    if config.kind.uses_splines() {
        let grid: Vec<f64> = years.years().map(f64::from).collect();
        let basis = bspline_basis(&grid, config.spline_count)?;
        gamma = (0..config.spline_count)
            .map(|_| config.gamma_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let smooth = &basis.matrix * DVector::from_column_slice(&gamma);
        for (m, v) in mean.iter_mut().zip(smooth.iter()) {
            *m += v;
        }
    }
    let truth: Vec<f64> = mean
        .iter()
        .map(|m| m + config.eta_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let truth_sd = {
        let n = truth.len() as f64;
        let m = truth.iter().sum::<f64>() / n;
        (truth.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
    };

    let mut prng = ChaCha8Rng::seed_from_u64(seed);
    prng.set_stream(3);
    let mut proxies = Vec::new();
    for (k, &count) in config.proxies_per_nest.iter().enumerate() {
        let interval = ProxyNest::interval_for(k + 1);
        for j in 0..count {
            let start = if k == 0 { FIRST_YEAR } else { prng.random_range(interval.start..=interval.end) };
            let a0: f64 = prng.random_range(-1.0..1.0);
            let a1: f64 = prng.random_range(0.5..1.5) * if prng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            let (lo, hi) = config.snr_range;
            let snr = if hi > lo { prng.random_range(lo..hi) } else { lo };
            let noise_sd = a1.abs() * truth_sd / snr;
            let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Numerical(e.to_string()))?;
            let values: Vec<Option<f64>> = (start..=LAST_YEAR)
                .map(|y| {
                    let v = a0 + a1 * truth[(y - FIRST_YEAR) as usize] + noise.sample(&mut prng);
                    // the record start and end stay observed
                    let missing = y != start && y != LAST_YEAR && prng.random::<f64>() < config.missing_rate;
                    (!missing).then_some(v)
                })
                .collect();
            let series = TimeSeries::new(format!("p{}_{:03}", k + 1, j + 1), start, values)?;
            proxies.push(PseudoProxy {
                nest: k + 1,
                start,
                a0,
                a1,
                noise_sd,
                snr,
                series,
            });
        }
    }
    let truth = TimeSeries::from_dense("truth", FIRST_YEAR, truth)?;
    let instrumental = truth.window(config.instrumental).with_name("temperature");
    Ok(PseudoWorld {
        config: config.clone(),
        seed,
        truth,
        beta: b,
        gamma,
        raw_forcings: raw,
        forcings,
        proxies,
        instrumental,
    })
}
