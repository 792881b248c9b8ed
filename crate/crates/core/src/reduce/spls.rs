//! Sparse partial least squares with soft-thresholded weight vectors.

use nalgebra::{DMatrix, DVector};

use super::{cv::cv_select, subset_rows, subset_vec, ReductionMethod, ReductionModel, Selected, Standardized};
use crate::error::{Error, Result};
use crate::linalg::ols;

/// Weights `W` (unit columns) and loadings `P` from successive deflation.
/// Stops early if the deflated covariance vanishes.
pub(crate) fn components(z: &DMatrix<f64>, yc: &DVector<f64>, eta: f64, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = z.ncols();
    let mut xa = z.clone();
    let mut ws = Vec::with_capacity(k);
    let mut ps = Vec::with_capacity(k);
    let scale = (z.transpose() * yc).amax();
    for _ in 0..k {
        let c = xa.transpose() * yc;
        let cmax = c.amax();
        if cmax <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        let thr = eta * cmax;
        let mut w = c.map(|v| if v.abs() > thr { v - thr * v.signum() } else { 0.0 });
        if w.iter().all(|v| *v == 0.0) {
            // eta close to 1: keep the single largest entry
            let j = c.iamax();
            w = DVector::zeros(p);
            w[j] = c[j].signum();
        }
        w /= w.norm();
        let t = &xa * &w;
        let tt = t.norm_squared();
        if tt <= 0.0 {
            break;
        }
        let load = xa.transpose() * &t / tt;
        xa -= &t * load.transpose();
        ws.push(w);
        ps.push(load);
    }
    (DMatrix::from_columns(&ws), DMatrix::from_columns(&ps))
}

/// Coefficients on the standardized scale using the first `k` components.
pub(crate) fn prefix_coef(
    z: &DMatrix<f64>,
    yc: &DVector<f64>,
    w: &DMatrix<f64>,
    p: &DMatrix<f64>,
    k: usize,
) -> Result<DVector<f64>> {
    let wk = w.columns(0, k).into_owned();
    let pk = p.columns(0, k).into_owned();
    let ptw = pk.transpose() * &wk;
    let inv = ptw
        .try_inverse()
        .ok_or_else(|| Error::Singular("sPLS loading/weight product".into()))?;
    let r = wk * inv;
    let scores = z * &r;
    let q = ols(&scores, yc)?.coef;
    Ok(r * q)
}

/// sPLS with fixed sparsity `eta` ∈ [0, 1) and `k` components.
pub fn spls_fit(x: &DMatrix<f64>, y: &DVector<f64>, eta: f64, k: usize) -> Result<ReductionModel> {
    if k == 0 {
        return Err(Error::invalid("sPLS needs at least one component"));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::invalid(format!("sPLS sparsity must lie in [0, 1), got {eta}")));
    }
    let limit = x.ncols().min(x.nrows().saturating_sub(1));
    if k > limit {
        return Err(Error::invalid(format!("sPLS with {k} components exceeds min(n-1, p) = {limit}")));
    }
    let st = Standardized::new(x, y)?;
    let (w, p) = components(&st.z, &st.yc, eta, k);
    let got = w.ncols();
    if got == 0 {
        return Err(Error::DegenerateSeries("response is orthogonal to every proxy column".into()));
    }
    let coef = prefix_coef(&st.z, &st.yc, &w, &p, got)?;
    Ok(st.into_model(
        ReductionMethod::Spls,
        Selected::Spls { eta, components: got },
        coef,
        Some(w),
        got,
        got < k,
    ))
}

/// Joint cross-validation over `etas` × 1..=max_k. Simpler models come first:
/// fewer components, then larger sparsity.
pub fn spls_cv(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    etas: &[f64],
    max_k: usize,
    folds: usize,
    seed: u64,
) -> Result<ReductionModel> {
    if etas.is_empty() || max_k == 0 {
        return Err(Error::invalid("sPLS grid is empty"));
    }
    // smallest training fold bounds the component count
    let n_train = x.nrows() - x.nrows().div_ceil(folds.max(1));
    let kmax = max_k.min(x.ncols()).min(n_train.saturating_sub(1)).max(1);
    let mut etas_desc = etas.to_vec();
    etas_desc.sort_by(|a, b| b.total_cmp(a));
    let grid: Vec<(usize, f64)> = (1..=kmax)
        .flat_map(|k| etas_desc.iter().map(move |&e| (k, e)))
        .collect();
    let cv = cv_select(y, grid.len(), folds, seed, |train, test| {
        let inner = Standardized::new(&subset_rows(x, train), &subset_vec(y, train))?;
        let zt = inner.apply(&subset_rows(x, test));
        let mut per_eta = Vec::with_capacity(etas_desc.len());
        for &e in &etas_desc {
            let (w, p) = components(&inner.z, &inner.yc, e, kmax);
            let mut preds = Vec::with_capacity(kmax);
            for k in 1..=kmax {
                let kk = k.min(w.ncols());
                let pred = if kk == 0 {
                    DVector::from_element(test.len(), inner.y_mean)
                } else {
                    (&zt * prefix_coef(&inner.z, &inner.yc, &w, &p, kk)?).add_scalar(inner.y_mean)
                };
                preds.push(pred);
            }
            per_eta.push(preds);
        }
        Ok(grid
            .iter()
            .map(|&(k, e)| {
                let i = etas_desc.iter().position(|v| *v == e).expect("eta in grid");
                per_eta[i][k - 1].clone()
            })
            .collect())
    })?;
    let (k, eta) = grid[cv.index];
    spls_fit(x, y, eta, k)
}
