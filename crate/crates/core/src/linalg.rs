//! Small dense linear-algebra helpers shared by the regression front-ends.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub fitted: DVector<f64>,
    pub rss: f64,
    /// R² against the mean of `y`; meaningful when the design spans the constant.
    pub r2: f64,
    pub rank: usize,
}

/// Minimum-norm least squares via SVD.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            y.len()
        )));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * x.nrows().max(x.ncols()) as f64;
    let rank = svd.rank(tol);
    let coef = svd
        .solve(y, tol)
        .map_err(|e| Error::Numerical(format!("least squares: {e}")))?;
    let fitted = x * &coef;
    let rss = (y - &fitted).norm_squared();
    let ybar = y.mean();
    let tss = y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN };
    Ok(OlsFit {
        coef,
        fitted,
        rss,
        r2,
        rank,
    })
}

/// Adjusted R² for a model with `params` coefficients (intercept included).
pub fn adjusted_r2(r2: f64, n: usize, params: usize) -> f64 {
    if n <= params {
        return f64::NAN;
    }
    1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n - params) as f64
}

/// Column-standardized copy (population sd), with the means and sds used.
/// Constant columns get sd 1 so they map to zero.
pub fn standardize_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut z = x.clone();
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let col = x.column(j);
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..x.nrows() {
            z[(i, j)] = (x[(i, j)] - m) / sd;
        }
        means.push(m);
        sds.push(sd);
    }
    (z, means, sds)
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in decreasing order.
pub fn symmetric_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (n - 1 denominator).
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Linearly interpolated quantile of sorted data (the usual "type 7").
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}
