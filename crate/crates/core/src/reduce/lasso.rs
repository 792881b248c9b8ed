//! L1-penalized least squares by cyclic coordinate descent.

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::{cv::cv_select, subset_rows, ReductionMethod, ReductionModel, Selected, Standardized};
use crate::error::{Error, Result};

const TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 200_000;

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lasso penalty must be finite and >= 0, got {lambda}")));
    }
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("{} rows vs {} responses", x.nrows(), y.len())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("lasso inputs contain non-finite entries"));
    }
    Ok(())
}

/// Smallest penalty with an all-zero solution: max_j |X_jᵀy| / n.
pub fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = x.nrows() as f64;
    (x.transpose() * y).amax() / n
}

/// Minimizes (1/2n)‖y − Xβ‖² + λ‖β‖₁ (no intercept).
pub fn lasso_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    lasso_fit_from(x, y, lambda, DVector::zeros(x.ncols()))
}

/// Coordinate descent from a warm start.
pub fn lasso_fit_from(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    start: DVector<f64>,
) -> Result<DVector<f64>> {
    check_inputs(x, y, lambda)?;
    let p = x.ncols();
    if lambda >= lambda_max(x, y) {
        return Ok(DVector::zeros(p));
    }
    let n = x.nrows() as f64;
    let norms: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared() / n).collect();
    let mut beta = start;
    let mut resid = y - x * &beta;
    for _ in 0..MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if norms[j] == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let col = x.column(j);
            let rho = col.dot(&resid) / n + norms[j] * beta[j];
            let new = soft_threshold(rho, lambda) / norms[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < TOL {
            return Ok(beta);
        }
    }
    warn!("lasso coordinate descent hit {MAX_SWEEPS} sweeps at lambda {lambda}");
    Ok(beta)
}

/// Largest violation of the lasso subgradient optimality conditions.
pub fn kkt_residual(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    let n = x.nrows() as f64;
    let grad = x.transpose() * (y - x * beta) / n;
    (0..beta.len())
        .map(|j| {
            if beta[j] == 0.0 {
                (grad[j].abs() - lambda).max(0.0)
            } else {
                (grad[j] - lambda * beta[j].signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// `len` log-spaced penalties from `lambda_max` down to `min_ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, len: usize, min_ratio: f64) -> Vec<f64> {
    if len == 1 {
        return vec![lambda_max];
    }
    let lo = min_ratio.ln();
    (0..len)
        .map(|i| lambda_max * (lo * i as f64 / (len - 1) as f64).exp())
        .collect()
}

/// Warm-started solutions along a decreasing penalty grid.
pub fn lasso_path(x: &DMatrix<f64>, y: &DVector<f64>, lambdas: &[f64]) -> Result<Vec<DVector<f64>>> {
    let mut beta = DVector::zeros(x.ncols());
    let mut out = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        beta = lasso_fit_from(x, y, l, beta)?;
        out.push(beta.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LassoConfig {
    pub grid_len: usize,
    pub min_ratio: f64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            grid_len: 100,
            min_ratio: 1e-4,
        }
    }
}

/// Lasso with the penalty chosen by K-fold cross-validation.
pub fn lasso_model(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &LassoConfig,
    folds: usize,
    seed: u64,
) -> Result<ReductionModel> {
    let st = Standardized::new(x, y)?;
    let lmax = lambda_max(&st.z, &st.yc);
    if lmax == 0.0 {
        return Err(Error::invalid("response is orthogonal to every proxy column"));
    }
    let grid = lambda_grid(lmax, cfg.grid_len, cfg.min_ratio);
    let cv = cv_select(y, grid.len(), folds, seed, |train, test| {
        let xt = subset_rows(x, train);
        let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
        let inner = Standardized::new(&xt, &yt)?;
        let path = lasso_path(&inner.z, &inner.yc, &grid)?;
        let xs = inner.apply(&subset_rows(x, test));
        Ok(path.iter().map(|b| xs.clone() * b).map(|p| p.add_scalar(inner.y_mean)).collect())
    })?;
    let lambda = grid[cv.index];
    let path = lasso_path(&st.z, &st.yc, &grid[..=cv.index])?;
    let coef = path.into_iter().last().expect("non-empty path");
    let active = coef.iter().filter(|b| **b != 0.0).count();
    Ok(st.into_model(
        ReductionMethod::Lasso,
        Selected::Lambda(lambda),
        coef,
        None,
        active,
        false,
    ))
}
