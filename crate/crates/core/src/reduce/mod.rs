//! Supervised "large p, small n" reductions of a proxy nest to one series.

pub mod cv;
pub mod lasso;
pub mod pcr;
pub mod sir;
pub mod spls;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{adjusted_r2, standardize_columns};
use crate::timeseries::{ProxyNest, TimeSeries, YearRange};

pub use cv::{cv_select, fold_labels, CvOutcome};
pub use lasso::{kkt_residual, lambda_grid, lambda_max, lasso_fit, lasso_model, lasso_path, LassoConfig};
pub use pcr::{first_crossing, pcr_model, pcr_select, spcr_fit, PcrSelection};
pub use sir::{sir_directions, sir_model, SirDirections};
pub use spls::{spls_cv, spls_fit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ReductionMethod {
    Lasso,
    Spls,
    Sir,
    Pcr,
    Spcr,
}

impl ReductionMethod {
    pub const ALL: [ReductionMethod; 5] = [
        ReductionMethod::Lasso,
        ReductionMethod::Spls,
        ReductionMethod::Sir,
        ReductionMethod::Pcr,
        ReductionMethod::Spcr,
    ];
}

impl fmt::Display for ReductionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReductionMethod::Lasso => "LASSO",
            ReductionMethod::Spls => "SPLS",
            ReductionMethod::Sir => "SIR",
            ReductionMethod::Pcr => "PCR",
            ReductionMethod::Spcr => "SPCR",
        })
    }
}

impl FromStr for ReductionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LASSO" => Ok(ReductionMethod::Lasso),
            "SPLS" => Ok(ReductionMethod::Spls),
            "SIR" => Ok(ReductionMethod::Sir),
            "PCR" => Ok(ReductionMethod::Pcr),
            "SPCR" => Ok(ReductionMethod::Spcr),
            other => Err(Error::invalid(format!("unknown reduction method `{other}`"))),
        }
    }
}

/// Hyperparameter picked for a fitted reduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Selected {
    Lambda(f64),
    Spls { eta: f64, components: usize },
    Sir { slices: usize, directions: usize },
    Components(usize),
    Threshold { theta: f64, kept: Vec<usize>, components: usize },
}

impl fmt::Display for Selected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selected::Lambda(l) => write!(f, "lambda={l}"),
            Selected::Spls { eta, components } => write!(f, "eta={eta};K={components}"),
            Selected::Sir { slices, directions } => write!(f, "H={slices};d={directions}"),
            Selected::Components(k) => write!(f, "k={k}"),
            Selected::Threshold { theta, kept, components } => {
                write!(f, "theta={theta};kept={};k={components}", kept.len())
            }
        }
    }
}

/// A fitted linear reduction. Predictions are `y_mean + z·coef` where `z` is
/// the input standardized with `col_means`/`col_sds`.
#[derive(Clone, Debug)]
pub struct ReductionModel {
    pub method: ReductionMethod,
    pub selected: Selected,
    pub col_means: Vec<f64>,
    pub col_sds: Vec<f64>,
    pub y_mean: f64,
    /// Coefficients on the standardized columns.
    pub coef: Vec<f64>,
    /// Direction vectors (columns) on the standardized scale, when the method has them.
    pub directions: Option<DMatrix<f64>>,
    /// Number of fitted slope parameters, used for adjusted R².
    pub effective_params: usize,
    /// Set when a selection rule fell back to its best attainable value.
    pub flagged: bool,
}

impl ReductionModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.coef.len() {
            return Err(Error::Dimension(format!(
                "model has {} columns, matrix has {}",
                self.coef.len(),
                x.ncols()
            )));
        }
        let z = standardize_with(x, &self.col_means, &self.col_sds);
        Ok((z * DVector::from_column_slice(&self.coef)).add_scalar(self.y_mean))
    }

    /// Intercept and slopes in the original column units.
    pub fn original_coefficients(&self) -> (f64, Vec<f64>) {
        let slopes: Vec<f64> = self.coef.iter().zip(&self.col_sds).map(|(b, s)| b / s).collect();
        let shift: f64 = slopes.iter().zip(&self.col_means).map(|(b, m)| b * m).sum();
        (self.y_mean - shift, slopes)
    }

    pub fn calibration_fit(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<CalibrationFit> {
        let fitted = self.predict(x)?;
        let ybar = y.mean();
        let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
        let rss = (y - fitted).norm_squared();
        let r2 = if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN };
        Ok(CalibrationFit {
            r2,
            adj_r2: adjusted_r2(r2, y.len(), self.effective_params + 1),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub r2: f64,
    pub adj_r2: f64,
}

#[derive(Clone, Debug)]
pub struct ReducedProxy {
    pub nest_index: usize,
    pub method: ReductionMethod,
    pub series: TimeSeries,
    pub calibration_fit: CalibrationFit,
    pub model: ReductionModel,
}

/// Settings shared by the five reductions.
#[derive(Clone, Debug)]
pub struct ReductionConfig {
    pub folds: usize,
    pub seed: u64,
    pub lasso: LassoConfig,
    pub spls_etas: Vec<f64>,
    pub spls_max_components: usize,
    pub sir_slices: usize,
    pub pcr_r2_min: f64,
    /// Number of sPCR thresholds, spread from max |r| down to `spcr_min_ratio`·max |r|.
    pub spcr_grid_len: usize,
    pub spcr_min_ratio: f64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 0,
            lasso: LassoConfig::default(),
            spls_etas: (0..10).map(|i| i as f64 / 10.0).collect(),
            spls_max_components: 5,
            sir_slices: 10,
            pcr_r2_min: 0.70,
            spcr_grid_len: 20,
            spcr_min_ratio: 0.05,
        }
    }
}

/// Fits `method` on a calibration matrix against the calibration target.
pub fn fit(method: ReductionMethod, x: &DMatrix<f64>, y: &DVector<f64>, cfg: &ReductionConfig) -> Result<ReductionModel> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("{} rows vs {} responses", x.nrows(), y.len())));
    }
    if x.ncols() == 0 {
        return Err(Error::invalid("reduction needs at least one proxy column"));
    }
    match method {
        ReductionMethod::Lasso => lasso_model(x, y, &cfg.lasso, cfg.folds, cfg.seed),
        ReductionMethod::Spls => spls_cv(x, y, &cfg.spls_etas, cfg.spls_max_components, cfg.folds, cfg.seed),
        ReductionMethod::Sir => sir_model(x, y, cfg.sir_slices.min(y.len() / 2), None),
        ReductionMethod::Pcr => pcr_model(x, y, cfg.pcr_r2_min),
        ReductionMethod::Spcr => {
            let grid = pcr::default_threshold_grid(x, y, cfg.spcr_grid_len, cfg.spcr_min_ratio);
            spcr_fit(x, y, &grid, cfg.pcr_r2_min, cfg.folds, cfg.seed)
        }
    }
}

/// Calibration-window target values aligned with the nest's calibration matrix.
pub fn calibration_target(nest: &ProxyNest, target: &TimeSeries) -> Result<DVector<f64>> {
    Ok(DVector::from_vec(target.dense(nest.calibration)?))
}

/// Applies `model` to the nest over its observation window and standardizes
/// the result over the calibration window.
pub fn build_reduced_proxy(nest: &ProxyNest, model: &ReductionModel, target: &TimeSeries) -> Result<ReducedProxy> {
    let window = nest.observation_window();
    let x = nest.design_matrix(window)?;
    let raw = model.predict(&x)?;
    let y = calibration_target(nest, target)?;
    let calibration_fit = model.calibration_fit(&nest.calibration_matrix, &y)?;
    let series = standardize_over(&raw, window, nest.calibration)?;
    let series = TimeSeries::from_dense(format!("RP{}_{}", nest.index, model.method), window.start, series)?;
    Ok(ReducedProxy {
        nest_index: nest.index,
        method: model.method,
        series,
        calibration_fit,
        model: model.clone(),
    })
}

/// Fits `method` on a nest and builds its reduced proxy.
pub fn reduce_nest(nest: &ProxyNest, method: ReductionMethod, target: &TimeSeries, cfg: &ReductionConfig) -> Result<ReducedProxy> {
    let y = calibration_target(nest, target)?;
    let model = fit(method, &nest.calibration_matrix, &y, cfg)?;
    build_reduced_proxy(nest, &model, target)
}

fn standardize_over(raw: &DVector<f64>, window: YearRange, calibration: YearRange) -> Result<Vec<f64>> {
    let rows: Vec<f64> = calibration
        .years()
        .filter(|y| window.contains(*y))
        .map(|y| raw[(y - window.start) as usize])
        .collect();
    if rows.len() < 2 {
        return Err(Error::Coverage("reduced proxy window misses the calibration period".into()));
    }
    let n = rows.len() as f64;
    let mean = rows.iter().sum::<f64>() / n;
    let sd = (rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateSeries(
            "reduced proxy is constant over the calibration window".into(),
        ));
    }
    Ok(raw.iter().map(|v| (v - mean) / sd).collect())
}

/// Writes `(nest, method, year, rp_value)` rows.
pub fn write_series_csv<W: Write>(out: W, rps: &[ReducedProxy]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["nest", "method", "year", "rp_value"])?;
    for rp in rps {
        for (year, v) in rp.series.observed() {
            w.write_record([
                rp.nest_index.to_string(),
                rp.method.to_string(),
                year.to_string(),
                v.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `(nest, method, hyperparameter, adj_r2)` rows.
pub fn write_summary_csv<W: Write>(out: W, rps: &[ReducedProxy]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["nest", "method", "hyperparameter", "adj_r2"])?;
    for rp in rps {
        w.write_record([
            rp.nest_index.to_string(),
            rp.method.to_string(),
            rp.model.selected.to_string(),
            rp.calibration_fit.adj_r2.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn standardize_with(x: &DMatrix<f64>, means: &[f64], sds: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - means[j]) / sds[j])
}

pub(crate) fn subset_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub(crate) fn subset_vec(y: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]))
}

/// Column-standardized design and centered response.
pub(crate) struct Standardized {
    pub z: DMatrix<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub y_mean: f64,
    pub yc: DVector<f64>,
}

impl Standardized {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension(format!("{} rows vs {} responses", x.nrows(), y.len())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("reduction inputs contain non-finite entries"));
        }
        let (z, means, sds) = standardize_columns(x);
        let y_mean = y.mean();
        Ok(Self {
            z,
            means,
            sds,
            y_mean,
            yc: y.add_scalar(-y_mean),
        })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        standardize_with(x, &self.means, &self.sds)
    }

    pub fn into_model(
        self,
        method: ReductionMethod,
        selected: Selected,
        coef: DVector<f64>,
        directions: Option<DMatrix<f64>>,
        effective_params: usize,
        flagged: bool,
    ) -> ReductionModel {
        ReductionModel {
            method,
            selected,
            col_means: self.means,
            col_sds: self.sds,
            y_mean: self.y_mean,
            coef: coef.iter().copied().collect(),
            directions,
            effective_params,
            flagged,
        }
    }
}
