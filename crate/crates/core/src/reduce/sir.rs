//! Sliced inverse regression with an optional ridge on the predictor covariance.

use nalgebra::{DMatrix, DVector};

use super::{ReductionMethod, ReductionModel, Selected, Standardized};
use crate::error::{Error, Result};
use crate::linalg::{ols, symmetric_eigen_desc};

/// Directions are retained while their eigenvalue is at least this fraction of the largest.
pub const RETAIN_RATIO: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct SirDirections {
    /// All generalized eigenvalues, decreasing.
    pub eigenvalues: Vec<f64>,
    /// Retained unit-norm directions (columns), in the coordinates of the input matrix.
    pub directions: DMatrix<f64>,
}

/// Row indices split into `h` near-equal slices of increasing `y`.
fn slices(y: &DVector<f64>, h: usize) -> Result<Vec<Vec<usize>>> {
    if h < 2 {
        return Err(Error::invalid(format!("SIR needs at least 2 slices, got {h}")));
    }
    let n = y.len();
    if n < 2 * h {
        return Err(Error::invalid(format!(
            "{n} observations give slices with fewer than 2 points; use at most {} slices",
            n / 2
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
    Ok((0..h)
        .map(|s| order[s * n / h..(s + 1) * n / h].to_vec())
        .collect())
}

/// Generalized eigen-decomposition of the slice-mean covariance against
/// `Σ̂ + ridge·I`.
pub fn sir_directions(x: &DMatrix<f64>, y: &DVector<f64>, h: usize, ridge: f64) -> Result<SirDirections> {
    if !(ridge >= 0.0) {
        return Err(Error::invalid(format!("SIR ridge must be >= 0, got {ridge}")));
    }
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("{} rows vs {} responses", x.nrows(), y.len())));
    }
    let groups = slices(y, h)?;
    let n = x.nrows() as f64;
    let p = x.ncols();
    let means = x.row_mean();
    let xc = DMatrix::from_fn(x.nrows(), p, |i, j| x[(i, j)] - means[j]);
    let mut sigma = xc.transpose() * &xc / n;
    for j in 0..p {
        sigma[(j, j)] += ridge;
    }
    let mut m = DMatrix::zeros(p, p);
    for g in &groups {
        let mut mh = DVector::zeros(p);
        for &i in g {
            mh += xc.row(i).transpose();
        }
        mh /= g.len() as f64;
        m += (g.len() as f64 / n) * &mh * mh.transpose();
    }
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Singular("predictor covariance; pass a positive ridge".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("predictor covariance factor".into()))?;
    let a = &linv * m * linv.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let (values, vectors) = symmetric_eigen_desc(&a);
    let lmax = values[0].max(0.0);
    let retain = values
        .iter()
        .take_while(|v| lmax > 0.0 && **v >= RETAIN_RATIO * lmax)
        .count()
        .clamp(1, h - 1)
        .min(p);
    let mut dirs = linv.transpose() * vectors.columns(0, retain);
    for mut c in dirs.column_iter_mut() {
        let norm = c.norm();
        if norm > 0.0 {
            c /= norm;
        }
    }
    Ok(SirDirections {
        eigenvalues: values,
        directions: dirs,
    })
}

/// SIR on the standardized matrix followed by regression on the retained
/// directions. `ridge = None` uses 0.01·tr(Σ̂)/p when p ≥ n and 0 otherwise.
pub fn sir_model(x: &DMatrix<f64>, y: &DVector<f64>, h: usize, ridge: Option<f64>) -> Result<ReductionModel> {
    let st = Standardized::new(x, y)?;
    let (n, p) = st.z.shape();
    let ridge = ridge.unwrap_or_else(|| {
        if p >= n {
            // standardized columns have unit variance, except constant ones
            let tr: f64 = (0..p).map(|j| st.z.column(j).norm_squared() / n as f64).sum();
            0.01 * tr / p as f64
        } else {
            0.0
        }
    });
    let sir = sir_directions(&st.z, &st.yc, h, ridge)?;
    let d = sir.directions;
    let scores = &st.z * &d;
    let q = ols(&scores, &st.yc)?.coef;
    let coef = &d * q;
    let k = d.ncols();
    Ok(st.into_model(
        ReductionMethod::Sir,
        Selected::Sir { slices: h, directions: k },
        coef,
        Some(d),
        k,
        false,
    ))
}
