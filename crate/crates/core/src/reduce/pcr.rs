//! Principal component regression and its correlation-screened variant.

use nalgebra::{DMatrix, DVector};

use super::{cv::cv_select, subset_rows, subset_vec, ReductionMethod, ReductionModel, Selected, Standardized};
use crate::error::{Error, Result};
use crate::linalg::{adjusted_r2, correlation, symmetric_eigen_desc};

#[derive(Clone, Debug, PartialEq)]
pub struct PcrSelection {
    pub k: usize,
    /// Adjusted R² for k = 1, 2, ...
    pub adj_r2: Vec<f64>,
    /// True when no k reached the threshold and the maximum was used instead.
    pub flagged: bool,
}

/// 1-based position of the first value at or above `threshold`.
pub fn first_crossing(seq: &[f64], threshold: f64) -> Option<usize> {
    seq.iter().position(|v| *v >= threshold).map(|i| i + 1)
}

struct Pcs {
    loadings: DMatrix<f64>,
    scores: DMatrix<f64>,
}

fn principal_components(z: &DMatrix<f64>) -> Pcs {
    let n = z.nrows() as f64;
    let cov = z.transpose() * z / n;
    let (values, vectors) = symmetric_eigen_desc(&cov);
    let top = values.first().copied().unwrap_or(0.0);
    let rank = values.iter().filter(|v| **v > 1e-10 * top.max(f64::MIN_POSITIVE)).count();
    let loadings = vectors.columns(0, rank).into_owned();
    let scores = z * &loadings;
    Pcs { loadings, scores }
}

/// Per-PC regression coefficients (scores are orthogonal).
fn score_coefs(scores: &DMatrix<f64>, yc: &DVector<f64>) -> Vec<f64> {
    scores
        .column_iter()
        .map(|t| t.dot(yc) / t.norm_squared())
        .collect()
}

fn select_on(pcs: &Pcs, yc: &DVector<f64>, r2_min: f64) -> Result<(PcrSelection, Vec<f64>)> {
    let n = yc.len();
    if n <= 2 {
        return Err(Error::invalid(format!("PCR needs more than 2 observations, got {n}")));
    }
    let q = score_coefs(&pcs.scores, yc);
    let tss = yc.norm_squared();
    let kmax = q.len().min(n - 2);
    let mut adj = Vec::with_capacity(kmax);
    let mut explained = 0.0;
    for k in 0..kmax {
        explained += q[k].powi(2) * pcs.scores.column(k).norm_squared();
        let r2 = if tss > 0.0 { explained / tss } else { 0.0 };
        adj.push(adjusted_r2(r2, n, k + 2));
    }
    if adj.is_empty() {
        return Err(Error::DegenerateSeries("proxy matrix has no variance".into()));
    }
    let sel = match first_crossing(&adj, r2_min) {
        Some(k) => PcrSelection { k, adj_r2: adj, flagged: false },
        None => {
            let mut best = 0;
            for (i, v) in adj.iter().enumerate() {
                if *v > adj[best] {
                    best = i;
                }
            }
            PcrSelection { k: best + 1, adj_r2: adj, flagged: true }
        }
    };
    Ok((sel, q))
}

/// PC count for regressing `y` on the leading PCs of the standardized `x`.
pub fn pcr_select(x: &DMatrix<f64>, y: &DVector<f64>, r2_min: f64) -> Result<PcrSelection> {
    let st = Standardized::new(x, y)?;
    Ok(select_on(&principal_components(&st.z), &st.yc, r2_min)?.0)
}

/// Standardized-scale coefficients for PCR on the given columns.
fn pcr_coef(z: &DMatrix<f64>, yc: &DVector<f64>, r2_min: f64) -> Result<(DVector<f64>, PcrSelection)> {
    let pcs = principal_components(z);
    let (sel, q) = select_on(&pcs, yc, r2_min)?;
    let coef = pcs.loadings.columns(0, sel.k) * DVector::from_column_slice(&q[..sel.k]);
    Ok((coef, sel))
}

pub fn pcr_model(x: &DMatrix<f64>, y: &DVector<f64>, r2_min: f64) -> Result<ReductionModel> {
    let st = Standardized::new(x, y)?;
    let (coef, sel) = pcr_coef(&st.z, &st.yc, r2_min)?;
    Ok(st.into_model(
        ReductionMethod::Pcr,
        Selected::Components(sel.k),
        coef,
        None,
        sel.k,
        sel.flagged,
    ))
}

fn abs_correlations(z: &DMatrix<f64>, y: &DVector<f64>) -> Vec<f64> {
    z.column_iter()
        .map(|c| {
            let c: Vec<f64> = c.iter().copied().collect();
            correlation(&c, y.as_slice()).abs()
        })
        .collect()
}

fn survivors(r: &[f64], theta: f64) -> Vec<usize> {
    (0..r.len()).filter(|&j| r[j] >= theta).collect()
}

fn columns(z: &DMatrix<f64>, keep: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), keep.len(), |i, j| z[(i, keep[j])])
}

/// `len` thresholds evenly spaced from max |r| down to `min_ratio`·max |r|.
pub fn default_threshold_grid(x: &DMatrix<f64>, y: &DVector<f64>, len: usize, min_ratio: f64) -> Vec<f64> {
    let r = abs_correlations(x, y);
    let rmax = r.iter().copied().fold(0.0, f64::max);
    if len <= 1 {
        return vec![rmax];
    }
    (0..len)
        .map(|i| rmax * (1.0 - (1.0 - min_ratio) * i as f64 / (len - 1) as f64))
        .collect()
}

/// Supervised PCR: keep columns with |corr(x_j, y)| ≥ θ, θ by cross-validation,
/// then PCR on the survivors.
pub fn spcr_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &[f64],
    r2_min: f64,
    folds: usize,
    seed: u64,
) -> Result<ReductionModel> {
    if grid.is_empty() {
        return Err(Error::invalid("sPCR threshold grid is empty"));
    }
    let mut thetas = grid.to_vec();
    thetas.sort_by(|a, b| b.total_cmp(a));
    thetas.dedup();
    let st = Standardized::new(x, y)?;
    let r = abs_correlations(&st.z, &st.yc);
    let smallest = *thetas.last().expect("non-empty grid");
    if survivors(&r, smallest).is_empty() {
        return Err(Error::invalid(format!(
            "no proxy column has |correlation| >= {smallest} with the target"
        )));
    }
    let theta = if thetas.len() == 1 {
        thetas[0]
    } else {
        let cv = cv_select(y, thetas.len(), folds, seed, |train, test| {
            let inner = Standardized::new(&subset_rows(x, train), &subset_vec(y, train))?;
            let zt = inner.apply(&subset_rows(x, test));
            let r = abs_correlations(&inner.z, &inner.yc);
            let mut out = Vec::with_capacity(thetas.len());
            for &t in &thetas {
                let keep = survivors(&r, t);
                let pred = if keep.is_empty() {
                    DVector::from_element(test.len(), inner.y_mean)
                } else {
                    match pcr_coef(&columns(&inner.z, &keep), &inner.yc, r2_min) {
                        Ok((coef, _)) => (columns(&zt, &keep) * coef).add_scalar(inner.y_mean),
                        Err(Error::DegenerateSeries(_)) => DVector::from_element(test.len(), inner.y_mean),
                        Err(e) => return Err(e),
                    }
                };
                out.push(pred);
            }
            Ok(out)
        })?;
        thetas[cv.index]
    };
    let mut theta = theta;
    let mut keep = survivors(&r, theta);
    if keep.is_empty() {
        theta = smallest;
        keep = survivors(&r, theta);
    }
    let (sub, sel) = pcr_coef(&columns(&st.z, &keep), &st.yc, r2_min)?;
    let mut coef = DVector::zeros(x.ncols());
    for (k, &j) in keep.iter().enumerate() {
        coef[j] = sub[k];
    }
    Ok(st.into_model(
        ReductionMethod::Spcr,
        Selected::Threshold {
            theta,
            kept: keep,
            components: sel.k,
        },
        coef,
        None,
        sel.k,
        sel.flagged,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn first_crossing_of_sequence() {
        assert_eq!(first_crossing(&[0.50, 0.72, 0.75], 0.70), Some(2));
        assert_eq!(first_crossing(&[0.1, 0.2], 0.70), None);
    }

    #[test]
    fn response_equal_to_first_pc_needs_one_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Normal::new(0.0, 1.0).unwrap();
        let f = DVector::from_fn(80, |_, _| d.sample(&mut rng));
        let x = DMatrix::from_fn(80, 5, |i, j| (j as f64 + 1.0) * f[i] + 0.2 * d.sample(&mut rng));
        let st = Standardized::new(&x, &f).unwrap();
        let pcs = principal_components(&st.z);
        let y = pcs.scores.column(0).into_owned();
        let sel = pcr_select(&x, &y, 0.7).unwrap();
        assert_eq!(sel.k, 1);
        assert!(!sel.flagged);
    }

    #[test]
    fn too_few_rows_rejected() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 3.0]);
        assert!(pcr_select(&x, &y, 0.7).is_err());
    }

    #[test]
    fn identical_columns_keep_all_with_one_component() {
        let y = DVector::from_fn(40, |i, _| ((i * 37) % 17) as f64);
        let x = DMatrix::from_fn(40, 4, |i, _| y[i]);
        let m = spcr_fit(&x, &y, &[0.9, 0.5], 0.7, 5, 1).unwrap();
        match m.selected {
            Selected::Threshold { kept, components, .. } => {
                assert_eq!(kept, vec![0, 1, 2, 3]);
                assert_eq!(components, 1);
            }
            other => panic!("unexpected selection {other:?}"),
        }
    }

    #[test]
    fn empty_survival_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Normal::new(0.0, 1.0).unwrap();
        let x = DMatrix::from_fn(100, 10, |_, _| d.sample(&mut rng));
        let y = DVector::from_fn(100, |_, _| d.sample(&mut rng));
        assert!(spcr_fit(&x, &y, &[0.99], 0.7, 10, 1).is_err());
    }
}
