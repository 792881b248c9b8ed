//! End-to-end runs: ingestion, screening, reduction, fit, reconstruction,
//! validation, artifacts and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inla::{self, Exploration, ExploreConfig, ReconstructionRow};
use crate::io::{self, RawForcings};
use crate::linalg::{mean, quantile_sorted};
use crate::mcmc::{self, Chain, ParamSummary};
use crate::model::{assemble, LatentGaussianModel, ModelKind, ModelSettings};
use crate::plot::{self, Curve};
use crate::reduce::{self, ReducedProxy, ReductionConfig, ReductionMethod};
use crate::scoring::{self, ScoreReport, ScoreTag, SmoothedReference, YearForecast};
use crate::splines::{bspline_basis, select_k, select_k_with_covariates, SplineBasis};
use crate::timeseries::{
    assign_nests, normal_score_transform, screen_correlation, screen_missing, transform_forcings, Centering,
    ForcingSet, ProxyNest, ScreenDecision, TimeSeries, YearRange, FIRST_YEAR, LAST_YEAR,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub proxies: PathBuf,
    pub forcings: PathBuf,
    pub temperature: PathBuf,
    pub output: PathBuf,
    /// Optional low-frequency reference `(year, anomaly)` for the smoothed MSE.
    pub smoothed_reference: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            proxies: "proxies.csv".into(),
            forcings: "forcings.csv".into(),
            temperature: "temperature.csv".into(),
            output: "output".into(),
            smoothed_reference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// 1 (first nest only) or 8 (every populated nest).
    pub nests: usize,
    pub methods: Vec<ReductionMethod>,
    /// Spline basis sizes over the full interval; selected from the
    /// calibration data when absent.
    pub k_nf: Option<usize>,
    pub k_mixed: Option<usize>,
    pub spline_r2_min: f64,
    /// Map each proxy to standard-normal scores before screening.
    pub normal_scores: bool,
    pub centering: Centering,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::WF,
            nests: 8,
            methods: vec![ReductionMethod::Spcr],
            k_nf: None,
            k_mixed: None,
            spline_r2_min: 0.70,
            normal_scores: true,
            centering: Centering::Calibration,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Windows {
    pub calibration: YearRange,
    pub validation: YearRange,
    /// Years scored against the smoothed reference.
    pub smoothed: YearRange,
}

impl Default for Windows {
    fn default() -> Self {
        Self {
            calibration: YearRange { start: 1900, end: LAST_YEAR },
            validation: YearRange { start: 1850, end: 1899 },
            smoothed: YearRange { start: 1600, end: 1899 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Screening {
    pub max_missing: f64,
    pub fdr: f64,
}

impl Default for Screening {
    fn default() -> Self {
        Self {
            max_missing: 0.05,
            fdr: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    NestedLaplace,
    Gibbs,
}

impl std::str::FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nested-laplace" => Ok(EngineKind::NestedLaplace),
            "gibbs" => Ok(EngineKind::Gibbs),
            other => Err(Error::Config(format!("unknown engine `{other}` (nested-laplace | gibbs)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub kind: EngineKind,
    pub explore: ExploreConfig,
    pub gibbs_iterations: usize,
    pub gibbs_burn_in: usize,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            kind: EngineKind::NestedLaplace,
            explore: ExploreConfig::default(),
            gibbs_iterations: 5000,
            gibbs_burn_in: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    /// Posterior draws per validation year for the sample CRPS.
    pub crps_draws: usize,
    /// Points per exported marginal density.
    pub density_grid: usize,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self {
            crps_draws: 10_000,
            density_grid: 201,
        }
    }
}

/// Run configuration, read from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    pub threads: Option<usize>,
    pub paths: Paths,
    pub model: ModelSection,
    pub windows: Windows,
    pub screening: Screening,
    pub engine: EngineSection,
    pub scoring: ScoringSection,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("invalid run configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    /// Applies `RECON_PROXIES`, `RECON_FORCINGS`, `RECON_TEMPERATURE`,
    /// `RECON_OUTPUT` and `RECON_THREADS` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        let paths = [
            ("RECON_PROXIES", &mut self.paths.proxies),
            ("RECON_FORCINGS", &mut self.paths.forcings),
            ("RECON_TEMPERATURE", &mut self.paths.temperature),
            ("RECON_OUTPUT", &mut self.paths.output),
        ];
        for (key, slot) in paths {
            if let Some(v) = lookup(key) {
                *slot = PathBuf::from(v);
            }
        }
        if let Some(v) = lookup("RECON_THREADS") {
            let n: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("RECON_THREADS=`{v}` is not a thread count")))?;
            self.threads = Some(n);
        }
        Ok(())
    }

    pub fn apply_process_env(&mut self) -> Result<()> {
        self.apply_env(|k| std::env::var(k).ok())
    }

    /// Absolute input and output paths, so a recorded configuration does
    /// not depend on the working directory.
    pub fn with_absolute_paths(&self) -> Result<Self> {
        let mut c = self.clone();
        let abs = |p: &Path| -> Result<PathBuf> {
            if p.exists() {
                Ok(fs::canonicalize(p)?)
            } else if p.is_absolute() {
                Ok(p.to_path_buf())
            } else {
                Ok(std::env::current_dir()?.join(p))
            }
        };
        c.paths.proxies = abs(&c.paths.proxies)?;
        c.paths.forcings = abs(&c.paths.forcings)?;
        c.paths.temperature = abs(&c.paths.temperature)?;
        c.paths.output = abs(&c.paths.output)?;
        if let Some(r) = &c.paths.smoothed_reference {
            c.paths.smoothed_reference = Some(abs(r)?);
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.windows;
        let full = YearRange { start: FIRST_YEAR, end: LAST_YEAR };
        for (name, r) in [("calibration", w.calibration), ("validation", w.validation), ("smoothed", w.smoothed)] {
            if !full.covers(&r) {
                return Err(Error::Config(format!("{name} window {r} lies outside {full}")));
            }
        }
        if w.calibration.overlaps(&w.validation) {
            return Err(Error::Config(format!(
                "validation window {} overlaps the calibration window {}",
                w.validation, w.calibration
            )));
        }
        if w.calibration.len() < 10 {
            return Err(Error::Config("calibration window needs at least 10 years".into()));
        }
        if !matches!(self.model.nests, 1 | 8) {
            return Err(Error::Config(format!("nest count must be 1 or 8, got {}", self.model.nests)));
        }
        if self.model.methods.is_empty() {
            return Err(Error::Config("at least one reduction method is required".into()));
        }
        let mut seen = self.model.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.model.methods.len() {
            return Err(Error::Config("reduction methods are listed twice".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be positive".into()));
        }
        if self.scoring.crps_draws < 2 {
            return Err(Error::Config("CRPS needs at least 2 draws per year".into()));
        }
        if self.engine.kind == EngineKind::Gibbs && (self.model.kind != ModelKind::WF || self.model.nests != 1) {
            return Err(Error::Config(format!(
                "the Gibbs engine supports model WF with 1 nest, not {} with {}",
                self.model.kind, self.model.nests
            )));
        }
        let e = &self.engine;
        if e.kind == EngineKind::Gibbs && e.gibbs_iterations <= e.gibbs_burn_in {
            return Err(Error::Config("Gibbs iterations must exceed the burn-in".into()));
        }
        Ok(())
    }
}

/// Raw inputs of a run.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub proxies: Vec<TimeSeries>,
    pub forcings: RawForcings,
    pub temperature: TimeSeries,
    pub smoothed_reference: Option<TimeSeries>,
}

impl Inputs {
    pub fn load(paths: &Paths) -> Result<Self> {
        for p in [&paths.proxies, &paths.forcings, &paths.temperature] {
            if !p.exists() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(Self {
            proxies: io::read_proxies_file(&paths.proxies)?,
            forcings: io::read_forcings_file(&paths.forcings)?,
            temperature: io::read_temperature_file(&paths.temperature)?,
            smoothed_reference: paths
                .smoothed_reference
                .as_deref()
                .map(io::read_temperature_file)
                .transpose()?,
        })
    }
}

/// Screened, nested, model-ready data shared by every method.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub nests: Vec<ProxyNest>,
    pub forcings: ForcingSet,
    /// Temperatures inside the calibration window only.
    pub calibration: TimeSeries,
    pub proxies_read: usize,
    pub proxies_kept: usize,
}

/// Normal scores, missing-data and correlation screens, nest assignment
/// and forcing transforms.
pub fn prepare(inputs: &Inputs, cfg: &RunConfig) -> Result<Prepared> {
    let cal = cfg.windows.calibration;
    let calibration = inputs.temperature.window(cal).with_name("calibration");
    if calibration.observed_count() != cal.len() {
        return Err(Error::Coverage(format!(
            "temperature record has {} of the {} calibration years",
            calibration.observed_count(),
            cal.len()
        )));
    }
    let mut kept = Vec::new();
    for p in &inputs.proxies {
        if screen_missing(p, cal, cfg.screening.max_missing)? == ScreenDecision::Drop {
            info!("dropping `{}`: too many missing calibration years", p.name());
            continue;
        }
        kept.push(if cfg.model.normal_scores { normal_score_transform(p)? } else { p.clone() });
    }
    let screen = screen_correlation(&kept, &calibration, cal, cfg.screening.fdr)?;
    let kept: Vec<TimeSeries> = screen.kept.iter().map(|&i| kept[i].clone()).collect();
    info!("{} of {} proxies pass screening", kept.len(), inputs.proxies.len());
    let mut nests = assign_nests(&kept, cal)?;
    if cfg.model.nests == 1 {
        nests.truncate(1);
    }
    nests.retain(|n| {
        if n.members.is_empty() {
            warn!("nest {} has no screened proxies and is skipped", n.index);
        }
        !n.members.is_empty()
    });
    if nests.is_empty() || (cfg.model.nests == 1 && nests[0].index != 1) {
        return Err(Error::Coverage("no screened proxies in the nests required by the run".into()));
    }
    let f = &inputs.forcings;
    let forcings = transform_forcings(&f.solar, &f.volcanic, &f.co2, cal, cfg.model.centering)?;
    Ok(Prepared {
        nests,
        forcings,
        calibration,
        proxies_read: inputs.proxies.len(),
        proxies_kept: kept.len(),
    })
}

/// Reduced proxies of every used nest for one method.
pub fn reduce_stage(prep: &Prepared, method: ReductionMethod, cfg: &RunConfig) -> Result<Vec<ReducedProxy>> {
    let rcfg = ReductionConfig {
        seed: cfg.seed,
        ..ReductionConfig::default()
    };
    prep.nests
        .par_iter()
        .map(|n| reduce::reduce_nest(n, method, &prep.calibration, &rcfg))
        .collect()
}

fn model_settings() -> ModelSettings {
    ModelSettings {
        years: YearRange { start: FIRST_YEAR, end: LAST_YEAR },
        ..ModelSettings::default()
    }
}

/// Spline basis of the configured model over the reconstruction years.
pub fn spline_basis(prep: &Prepared, cfg: &RunConfig) -> Result<Option<SplineBasis>> {
    let years = model_settings().years;
    let r2 = cfg.model.spline_r2_min;
    let k = match cfg.model.kind {
        ModelKind::WF => return Ok(None),
        ModelKind::NF => match cfg.model.k_nf {
            Some(k) => k,
            None => select_k(&prep.calibration, r2, years.len())?.k_full,
        },
        ModelKind::Mixed => match cfg.model.k_mixed {
            Some(k) => k,
            None => {
                let cal = prep.calibration.range();
                let covs: Vec<Vec<f64>> = prep
                    .forcings
                    .covariates()
                    .iter()
                    .map(|s| s.dense(cal))
                    .collect::<Result<_>>()?;
                let x = nalgebra::DMatrix::from_fn(cal.len(), 3, |t, j| covs[j][t]);
                select_k_with_covariates(&prep.calibration, Some(&x), r2, years.len())?.k_full
            }
        },
    };
    let grid: Vec<f64> = years.years().map(f64::from).collect();
    Ok(Some(bspline_basis(&grid, k)?))
}

/// Posterior from either engine.
#[derive(Clone, Debug)]
pub enum Posterior {
    Laplace(Exploration),
    Gibbs(Chain),
}

#[derive(Clone, Debug)]
pub struct Fit {
    pub method: ReductionMethod,
    pub rps: Vec<ReducedProxy>,
    pub lgm: LatentGaussianModel,
    pub posterior: Posterior,
}

pub fn fit_stage(prep: &Prepared, method: ReductionMethod, rps: Vec<ReducedProxy>, cfg: &RunConfig) -> Result<Fit> {
    let basis = spline_basis(prep, cfg)?;
    let settings = model_settings();
    let lgm = assemble(
        cfg.model.kind,
        &rps,
        Some(&prep.forcings),
        basis.as_ref(),
        &prep.calibration,
        &settings,
    )?;
    let posterior = match cfg.engine.kind {
        EngineKind::NestedLaplace => Posterior::Laplace(inla::explore_hyper(&lgm, &cfg.engine.explore)?),
        EngineKind::Gibbs => {
            let e = &cfg.engine;
            Posterior::Gibbs(mcmc::gibbs_wf(
                &rps[0],
                &prep.forcings,
                &prep.calibration,
                &settings,
                e.gibbs_iterations,
                e.gibbs_burn_in,
                cfg.seed,
            )?)
        }
    };
    Ok(Fit {
        method,
        rps,
        lgm,
        posterior,
    })
}

/// Names of the process and link coefficients, in model order.
pub fn coefficient_names(lgm: &LatentGaussianModel) -> Vec<String> {
    lgm.names.iter().filter(|n| !n.starts_with("T[")).cloned().collect()
}

impl Fit {
    pub fn summary(&self, name: &str) -> Result<ParamSummary> {
        match &self.posterior {
            Posterior::Laplace(ex) => {
                let m = inla::marginal(&self.lgm, &ex.points, name)?;
                Ok(ParamSummary {
                    name: name.to_string(),
                    mean: m.mean(),
                    sd: m.sd(),
                    q025: m.quantile(0.025)?,
                    q975: m.quantile(0.975)?,
                    ess: None,
                })
            }
            Posterior::Gibbs(chain) => mcmc::summarize(name, &chain.column(name)?),
        }
    }

    pub fn density(&self, name: &str, grid: usize) -> Result<Vec<(f64, f64)>> {
        match &self.posterior {
            Posterior::Laplace(ex) => Ok(inla::marginal(&self.lgm, &ex.points, name)?.grid(grid, 5.0)),
            Posterior::Gibbs(chain) => Ok(mcmc::kernel_density(&chain.column(name)?, grid, 5.0)),
        }
    }

    pub fn reconstruction(&self) -> Result<Vec<ReconstructionRow>> {
        match &self.posterior {
            Posterior::Laplace(ex) => inla::reconstruct(&self.lgm, &ex.points),
            Posterior::Gibbs(chain) => model_settings()
                .years
                .years()
                .map(|y| {
                    let s = mcmc::summarize("T", &chain.column(&format!("T[{y}]"))?)?;
                    Ok(ReconstructionRow {
                        year: y,
                        mean: s.mean,
                        sd: s.sd,
                        q025: s.q025,
                        q975: s.q975,
                    })
                })
                .collect(),
        }
    }

    /// Predictive summaries and draws of `T` over `window`.
    pub fn forecasts(&self, window: YearRange, draws: usize, seed: u64) -> Result<Vec<YearForecast>> {
        let idx: Vec<usize> = window
            .years()
            .map(|y| self.lgm.parameter_index(&format!("T[{y}]")))
            .collect::<Result<_>>()?;
        match &self.posterior {
            Posterior::Laplace(ex) => {
                let d = inla::sample_posterior(&ex.points, draws, seed, Some(&idx))?;
                window
                    .years()
                    .zip(&idx)
                    .enumerate()
                    .map(|(k, (year, &i))| {
                        let m = inla::marginal_by_index(&ex.points, i)?;
                        Ok(YearForecast {
                            year,
                            mean: m.mean(),
                            interval80: (m.quantile(0.1)?, m.quantile(0.9)?),
                            interval95: (m.quantile(0.025)?, m.quantile(0.975)?),
                            draws: d.column(k),
                        })
                    })
                    .collect()
            }
            Posterior::Gibbs(chain) => window
                .years()
                .map(|year| {
                    let x = chain.column(&format!("T[{year}]"))?;
                    let mut s = x.clone();
                    s.sort_by(f64::total_cmp);
                    Ok(YearForecast {
                        year,
                        mean: mean(&x),
                        interval80: (quantile_sorted(&s, 0.1), quantile_sorted(&s, 0.9)),
                        interval95: (quantile_sorted(&s, 0.025), quantile_sorted(&s, 0.975)),
                        draws: x,
                    })
                })
                .collect(),
        }
    }
}

/// How far a run goes; each stage writes its own artifacts and those of the
/// stages before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Reduce,
    Fit,
    Reconstruct,
    Validate,
    All,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything needed to replay a run, plus what it produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub stage: Stage,
    pub config: RunConfig,
    pub timings: Vec<StageTiming>,
    /// SHA-256 of each input file, keyed by path; empty for in-memory runs.
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<String>,
}

fn input_digests(paths: &Paths) -> Result<Vec<(PathBuf, String)>> {
    let mut files = vec![paths.proxies.clone(), paths.forcings.clone(), paths.temperature.clone()];
    files.extend(paths.smoothed_reference.clone());
    files
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p)?;
            Ok((p, hex::encode(Sha256::digest(&bytes))))
        })
        .collect()
}

/// Result of one run: per-method fits, scores and the files written.
pub struct RunOutcome {
    pub fits: Vec<Fit>,
    pub scores: Vec<ScoreReport>,
    pub manifest: Manifest,
}

struct Timer {
    timings: Vec<StageTiming>,
}

impl Timer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

fn method_seed(seed: u64, method: ReductionMethod) -> u64 {
    let k = ReductionMethod::ALL.iter().position(|m| *m == method).unwrap_or(0) as u64;
    seed.wrapping_add(1 + k)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;
    pool.install(f)
}

/// Loads inputs from the configured paths and runs up to `stage`.
pub fn run_pipeline(cfg: &RunConfig, stage: Stage) -> Result<RunOutcome> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let cfg = cfg.with_absolute_paths().map_err(|e| e.in_stage("config"))?;
    let inputs = Inputs::load(&cfg.paths).map_err(|e| e.in_stage("ingest"))?;
    let digests = input_digests(&cfg.paths).map_err(|e| e.in_stage("ingest"))?;
    with_pool(cfg.threads, || run_inner(&inputs, &cfg, stage, digests))
}

/// Runs up to `stage` on in-memory inputs, writing artifacts into
/// `cfg.paths.output`.
pub fn run_with_inputs(inputs: &Inputs, cfg: &RunConfig, stage: Stage) -> Result<RunOutcome> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    with_pool(cfg.threads, || run_inner(inputs, cfg, stage, Vec::new()))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], outputs: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    outputs.push(name.to_string());
    Ok(())
}

fn run_inner(inputs: &Inputs, cfg: &RunConfig, stage: Stage, digests: Vec<(PathBuf, String)>) -> Result<RunOutcome> {
    let out = &cfg.paths.output;
    fs::create_dir_all(out).map_err(|e| Error::from(e).in_stage("output"))?;
    let mut timer = Timer { timings: Vec::new() };
    let mut outputs = Vec::new();
    let prep = timer.run("screen", || prepare(inputs, cfg))?;
    let methods = &cfg.model.methods;

    let all_rps: Vec<Vec<ReducedProxy>> =
        timer.run("reduce", || methods.par_iter().map(|&m| reduce_stage(&prep, m, cfg)).collect())?;
    timer.run("reduce", || {
        let flat: Vec<ReducedProxy> = all_rps.iter().flatten().cloned().collect();
        let mut buf = Vec::new();
        reduce::write_series_csv(&mut buf, &flat)?;
        write_file(out, "reduced_proxies.csv", &buf, &mut outputs)?;
        let mut buf = Vec::new();
        reduce::write_summary_csv(&mut buf, &flat)?;
        write_file(out, "reduction_summary.csv", &buf, &mut outputs)
    })?;

    let mut fits = Vec::new();
    let mut scores = Vec::new();
    if stage >= Stage::Fit {
        fits = timer.run("fit", || {
            methods
                .iter()
                .zip(all_rps)
                .map(|(&m, rps)| fit_stage(&prep, m, rps, cfg))
                .collect::<Result<Vec<_>>>()
        })?;
        timer.run("fit", || {
            for fit in &fits {
                let names = coefficient_names(&fit.lgm);
                let mut buf = Vec::new();
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(["parameter", "grid_value", "density"])?;
                let mut panels = Vec::new();
                for name in &names {
                    let d = fit.density(name, cfg.scoring.density_grid)?;
                    for (x, v) in &d {
                        w.write_record([name.clone(), x.to_string(), v.to_string()])?;
                    }
                    if name.starts_with("beta") && !name.contains('[') {
                        panels.push((name.clone(), d));
                    }
                }
                w.flush()?;
                drop(w);
                let tag = fit.method.to_string().to_lowercase();
                write_file(out, &format!("marginals_{tag}.csv"), &buf, &mut outputs)?;
                let summaries: Vec<ParamSummary> = names.iter().map(|n| fit.summary(n)).collect::<Result<_>>()?;
                let mut buf = Vec::new();
                mcmc::write_summary_csv(&mut buf, &summaries)?;
                write_file(out, &format!("coefficients_{tag}.csv"), &buf, &mut outputs)?;
                let label = format!("{} {}", cfg.model.kind, fit.method);
                let svg_panels: Vec<(&str, Vec<Curve<'_>>)> = panels
                    .iter()
                    .map(|(n, d)| (n.as_str(), vec![Curve { label: &label, points: d }]))
                    .collect();
                write_file(
                    out,
                    &format!("coefficients_{tag}.svg"),
                    plot::density_svg(&svg_panels).as_bytes(),
                    &mut outputs,
                )?;
            }
            Ok(())
        })?;
    }
    if stage >= Stage::Reconstruct {
        timer.run("reconstruct", || {
            for fit in &fits {
                let rows = fit.reconstruction()?;
                let tag = fit.method.to_string().to_lowercase();
                let mut buf = Vec::new();
                inla::write_reconstruction_csv(&mut buf, &rows)?;
                write_file(out, &format!("reconstruction_{tag}.csv"), &buf, &mut outputs)?;
                let title = format!(
                    "{} model, {} nest(s), {}: posterior mean and 95% band",
                    cfg.model.kind, cfg.model.nests, fit.method
                );
                let svg = plot::reconstruction_svg(&title, &rows, Some(&inputs.temperature));
                write_file(out, &format!("reconstruction_{tag}.svg"), svg.as_bytes(), &mut outputs)?;
            }
            Ok(())
        })?;
    }
    if stage >= Stage::Validate {
        scores = timer.run("validate", || {
            let reports = fits
                .iter()
                .map(|fit| score_fit(fit, inputs, cfg))
                .collect::<Result<Vec<_>>>()?;
            let mut buf = Vec::new();
            scoring::write_scores_csv(&mut buf, &reports)?;
            write_file(out, "scores.csv", &buf, &mut outputs)?;
            Ok(reports)
        })?;
    }
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        tool: "inla-recon".into(),
        version: VERSION.into(),
        seed: cfg.seed,
        stage,
        config: cfg.clone(),
        timings: timer.timings,
        inputs: digests,
        outputs,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::from(e).in_stage("manifest"))?;
    Ok(RunOutcome {
        fits,
        scores,
        manifest,
    })
}

/// Validation scores of one fit over the configured window.
pub fn score_fit(fit: &Fit, inputs: &Inputs, cfg: &RunConfig) -> Result<ScoreReport> {
    let w = &cfg.windows;
    let forecasts = fit.forecasts(w.validation, cfg.scoring.crps_draws, method_seed(cfg.seed, fit.method))?;
    let rows = fit.reconstruction()?;
    let mean_series = TimeSeries::from_dense("reconstruction", rows[0].year, rows.iter().map(|r| r.mean).collect())?;
    let smoothed = inputs.smoothed_reference.as_ref().map(|s| SmoothedReference {
        series: s,
        window: w.smoothed,
    });
    scoring::validation_suite(
        ScoreTag {
            model: cfg.model.kind.to_string(),
            n_nests: cfg.model.nests,
            method: fit.method.to_string(),
        },
        &forecasts,
        &mean_series,
        &inputs.temperature,
        w.validation,
        w.calibration,
        smoothed,
    )
}

/// Re-runs the configuration recorded in a manifest, optionally into a
/// different output directory. Inputs whose digest changed are refused.
pub fn replay(manifest_path: &Path, output: Option<PathBuf>) -> Result<RunOutcome> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", manifest_path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let now = input_digests(&m.config.paths).map_err(|e| e.in_stage("replay"))?;
    if now != m.inputs {
        return Err(Error::Config(format!(
            "inputs changed since {} was written; refusing to replay",
            manifest_path.display()
        ))
        .in_stage("replay"));
    }
    let mut cfg = m.config;
    if let Some(o) = output {
        cfg.paths.output = o;
    }
    run_pipeline(&cfg, m.stage)
}

/// Side-by-side nested-Laplace and Gibbs fits of model WF with one nest.
#[derive(Clone, Debug)]
pub struct EngineComparison {
    pub parameters: Vec<String>,
    pub laplace: Vec<ParamSummary>,
    pub gibbs: Vec<ParamSummary>,
    pub laplace_seconds: f64,
    pub gibbs_seconds: f64,
    /// Nested-Laplace over Gibbs 95% interval width, per parameter.
    pub width_ratio: Vec<f64>,
}

/// Compares the engines on the first reduction method of `cfg`.
pub fn compare_engines(inputs: &Inputs, cfg: &RunConfig) -> Result<EngineComparison> {
    if cfg.model.kind != ModelKind::WF || cfg.model.nests != 1 {
        return Err(Error::Config(format!(
            "engine comparison needs model WF with 1 nest (the Gibbs sampler's scope), not {} with {}",
            cfg.model.kind, cfg.model.nests
        )));
    }
    let mut base = cfg.clone();
    base.engine.kind = EngineKind::NestedLaplace;
    base.validate().map_err(|e| e.in_stage("config"))?;
    with_pool(cfg.threads, || compare_inner(inputs, &base))
}

fn compare_inner(inputs: &Inputs, cfg: &RunConfig) -> Result<EngineComparison> {
    let prep = prepare(inputs, cfg).map_err(|e| e.in_stage("screen"))?;
    let method = cfg.model.methods[0];
    let rps = reduce_stage(&prep, method, cfg).map_err(|e| e.in_stage("reduce"))?;

    let t = Instant::now();
    let laplace = fit_stage(&prep, method, rps.clone(), cfg).map_err(|e| e.in_stage("fit"))?;
    let parameters = coefficient_names(&laplace.lgm);
    let l_sum: Vec<ParamSummary> = parameters.iter().map(|n| laplace.summary(n)).collect::<Result<_>>()?;
    let laplace_seconds = t.elapsed().as_secs_f64();

    let mut gcfg = cfg.clone();
    gcfg.engine.kind = EngineKind::Gibbs;
    let t = Instant::now();
    let gibbs = fit_stage(&prep, method, rps, &gcfg).map_err(|e| e.in_stage("gibbs"))?;
    let g_sum: Vec<ParamSummary> = parameters.iter().map(|n| gibbs.summary(n)).collect::<Result<_>>()?;
    let gibbs_seconds = t.elapsed().as_secs_f64();

    let width_ratio = l_sum
        .iter()
        .zip(&g_sum)
        .map(|(l, g)| (l.q975 - l.q025) / (g.q975 - g.q025))
        .collect();
    let cmp = EngineComparison {
        parameters,
        laplace: l_sum,
        gibbs: g_sum,
        laplace_seconds,
        gibbs_seconds,
        width_ratio,
    };
    write_comparison(&cmp, &laplace, &gibbs, cfg).map_err(|e| e.in_stage("output"))?;
    Ok(cmp)
}

fn write_comparison(cmp: &EngineComparison, laplace: &Fit, gibbs: &Fit, cfg: &RunConfig) -> Result<()> {
    let out = &cfg.paths.output;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("compare_summary.csv"))?;
    w.write_record(["parameter", "engine", "mean", "sd", "q025", "q975", "width_ratio"])?;
    for (i, p) in cmp.parameters.iter().enumerate() {
        for (engine, s) in [("nested-laplace", &cmp.laplace[i]), ("gibbs", &cmp.gibbs[i])] {
            w.write_record([
                p.clone(),
                engine.into(),
                s.mean.to_string(),
                s.sd.to_string(),
                s.q025.to_string(),
                s.q975.to_string(),
                cmp.width_ratio[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("compare_timing.csv"))?;
    w.write_record(["engine", "seconds"])?;
    w.write_record(["nested-laplace".to_string(), cmp.laplace_seconds.to_string()])?;
    w.write_record(["gibbs".to_string(), cmp.gibbs_seconds.to_string()])?;
    w.flush()?;

    let grid = cfg.scoring.density_grid;
    let mut w = csv::Writer::from_path(out.join("compare_density.csv"))?;
    w.write_record(["parameter", "engine", "grid_value", "density"])?;
    let mut panels = Vec::new();
    for p in cmp.parameters.iter().filter(|p| p.starts_with("beta")) {
        let dl = laplace.density(p, grid)?;
        let dg = gibbs.density(p, grid)?;
        for (engine, d) in [("nested-laplace", &dl), ("gibbs", &dg)] {
            for (x, v) in d {
                w.write_record([p.clone(), engine.into(), x.to_string(), v.to_string()])?;
            }
        }
        panels.push((p.clone(), dl, dg));
    }
    w.flush()?;
    let svg_panels: Vec<(&str, Vec<Curve<'_>>)> = panels
        .iter()
        .map(|(p, dl, dg)| {
            (
                p.as_str(),
                vec![
                    Curve {
                        label: "nested-laplace",
                        points: dl,
                    },
                    Curve {
                        label: "gibbs",
                        points: dg,
                    },
                ],
            )
        })
        .collect();
    fs::write(out.join("compare_densities.svg"), plot::density_svg(&svg_panels))?;
    Ok(())
}
