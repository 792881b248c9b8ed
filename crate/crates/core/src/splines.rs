//! Cubic B-spline bases on open uniform knot vectors and basis-size selection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{adjusted_r2, ols};
use crate::timeseries::TimeSeries;

pub const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

/// Evaluated cubic B-spline basis.
#[derive(Clone, Debug)]
pub struct SplineBasis {
    pub knots: Vec<f64>,
    pub count: usize,
    pub grid: Vec<f64>,
    /// Rows follow `grid`, columns the basis functions.
    pub matrix: DMatrix<f64>,
}

/// Open uniform knot vector on `[lo, hi]` for `count` cubic basis functions.
pub fn open_uniform_knots(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let spans = count - DEGREE;
    let mut knots = Vec::with_capacity(count + ORDER);
    knots.extend(std::iter::repeat_n(lo, DEGREE));
    for i in 0..=spans {
        knots.push(lo + (hi - lo) * i as f64 / spans as f64);
    }
    knots.extend(std::iter::repeat_n(hi, DEGREE));
    knots
}

/// Values of the `ORDER` basis functions that are nonzero at `x`, together
/// with the index of the first of them (de Boor's triangular scheme).
fn nonzero_basis(knots: &[f64], count: usize, x: f64) -> (usize, [f64; ORDER]) {
    // knot span with t[mu] <= x < t[mu+1]; the right end belongs to the last span
    let mut mu = DEGREE;
    while mu < count - 1 && x >= knots[mu + 1] {
        mu += 1;
    }
    let mut n = [0.0; ORDER];
    let mut left = [0.0; ORDER];
    let mut right = [0.0; ORDER];
    n[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = x - knots[mu + 1 - j];
        right[j] = knots[mu + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (mu - DEGREE, n)
}

impl SplineBasis {
    /// Values of all basis functions at `x`.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let mut row = vec![0.0; self.count];
        let (first, vals) = nonzero_basis(&self.knots, self.count, x);
        row[first..first + ORDER].copy_from_slice(&vals);
        row
    }
}

/// Cubic basis with `count` functions on uniform knots spanning the grid.
pub fn bspline_basis(grid: &[f64], count: usize) -> Result<SplineBasis> {
    if count < ORDER {
        return Err(Error::invalid(format!(
            "a cubic B-spline basis needs at least {ORDER} functions, got {count}"
        )));
    }
    if grid.len() < count {
        return Err(Error::invalid(format!(
            "grid of {} points cannot support {count} basis functions",
            grid.len()
        )));
    }
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::invalid("spline grid has zero width"));
    }
    let knots = open_uniform_knots(lo, hi, count);
    let mut matrix = DMatrix::zeros(grid.len(), count);
    for (r, &x) in grid.iter().enumerate() {
        let (first, vals) = nonzero_basis(&knots, count, x);
        for (k, v) in vals.iter().enumerate() {
            matrix[(r, first + k)] = *v;
        }
    }
    Ok(SplineBasis {
        knots,
        count,
        grid: grid.to_vec(),
        matrix,
    })
}

pub fn year_grid(series: &TimeSeries) -> Vec<f64> {
    series.range().years().map(f64::from).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KSelection {
    pub k_calibration: usize,
    pub k_full: usize,
    pub adjusted_r2: f64,
    /// The threshold was never reached; `k_calibration` is the adjusted-R² maximizer.
    pub flagged: bool,
}

/// Basis size for the calibration series and its density-preserving
/// extrapolation to `full_interval_years`.
pub fn select_k(calibration: &TimeSeries, r2_min: f64, full_interval_years: usize) -> Result<KSelection> {
    select_k_with_covariates(calibration, None, r2_min, full_interval_years)
}

/// As [`select_k`], with extra regressors (e.g. forcings) kept in every fit.
pub fn select_k_with_covariates(
    calibration: &TimeSeries,
    covariates: Option<&DMatrix<f64>>,
    r2_min: f64,
    full_interval_years: usize,
) -> Result<KSelection> {
    let y = DVector::from_vec(calibration.dense(calibration.range())?);
    let n = y.len();
    let extra = covariates.map_or(0, |c| c.ncols());
    if let Some(c) = covariates {
        if c.nrows() != n {
            return Err(Error::Dimension(format!(
                "covariates have {} rows for {n} calibration years",
                c.nrows()
            )));
        }
    }
    let grid = year_grid(calibration);
    let k_max = (n / 2).max(ORDER);
    let constant = y.max() == y.min();

    let mut best = (ORDER, f64::NEG_INFINITY);
    let mut chosen = None;
    if !constant {
        for k in ORDER..=k_max {
            let basis = bspline_basis(&grid, k)?;
            let x = match covariates {
                Some(c) => {
                    let mut x = DMatrix::zeros(n, k + extra);
                    x.columns_mut(0, k).copy_from(&basis.matrix);
                    x.columns_mut(k, extra).copy_from(c);
                    x
                }
                None => basis.matrix,
            };
            let fit = ols(&x, &y)?;
            let adj = adjusted_r2(fit.r2, n, k + extra);
            if adj > best.1 {
                best = (k, adj);
            }
            if adj >= r2_min {
                chosen = Some((k, adj));
                break;
            }
        }
    }
    let (k_cal, adj, flagged) = match chosen {
        Some((k, adj)) => (k, adj, false),
        None if constant => (ORDER, f64::NAN, true),
        None => (best.0, best.1, true),
    };
    Ok(KSelection {
        k_calibration: k_cal,
        k_full: scale_basis_count(k_cal, calibration.len(), full_interval_years),
        adjusted_r2: adj,
        flagged,
    })
}

/// Keeps the number of bases per year constant: the calibration series
/// spans `calibration_years - 1` years between its first and last sample.
pub fn scale_basis_count(k_calibration: usize, calibration_years: usize, full_interval_years: usize) -> usize {
    let span = (calibration_years.max(2) - 1) as f64;
    let k = (k_calibration as f64 * full_interval_years as f64 / span).round() as usize;
    k.max(ORDER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Textbook Cox–de Boor recursion, with the right endpoint assigned to the
    /// last non-degenerate interval.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            let last = *knots.last().unwrap();
            let inside = knots[i] <= x && x < knots[i + 1];
            let at_end = x == last && knots[i] < x && knots[i + 1] == last;
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, x);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - x) / d2 * cox_de_boor(knots, i + 1, p - 1, x);
        }
        v
    }

    #[test]
    fn four_bases_are_bernstein_cubics() {
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let b = bspline_basis(&grid, 4).unwrap();
        let mid = b.evaluate(0.5);
        for (v, e) in mid.iter().zip([0.125, 0.375, 0.375, 0.125]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
        for (r, &t) in grid.iter().enumerate() {
            let s = 1.0 - t;
            let bern = [s * s * s, 3.0 * t * s * s, 3.0 * t * t * s, t * t * t];
            for k in 0..4 {
                assert_abs_diff_eq!(b.matrix[(r, k)], bern[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matches_recursive_definition_including_knots() {
        let grid: Vec<f64> = (1900..=2000).map(f64::from).collect();
        let b = bspline_basis(&grid, 9).unwrap();
        let mut points: Vec<f64> = b.knots.clone();
        points.extend([1903.7, 1950.5, 1999.99]);
        for x in points {
            let v = b.evaluate(x);
            for k in 0..9 {
                assert_abs_diff_eq!(v[k], cox_de_boor(&b.knots, k, 3, x), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn support_spans_at_most_four_knot_intervals() {
        let grid: Vec<f64> = (1..=2000).map(f64::from).collect();
        let b = bspline_basis(&grid, 120).unwrap();
        let width = (2000.0 - 1.0) / 117.0;
        for k in 0..120 {
            let col = b.matrix.column(k);
            let nz: Vec<usize> = (0..grid.len()).filter(|&r| col[r] != 0.0).collect();
            assert!(col.iter().all(|v| *v >= 0.0));
            let span = grid[*nz.last().unwrap()] - grid[nz[0]];
            assert!(span <= 4.0 * width + 1e-9);
        }
    }

    #[test]
    fn rejects_too_few_bases() {
        assert!(bspline_basis(&[0.0, 1.0, 2.0, 3.0, 4.0], 3).is_err());
        assert!(bspline_basis(&[0.0, 1.0, 2.0], 4).is_err());
    }

    proptest! {
        #[test]
        fn partition_of_unity(k in 4usize..40, n in 40usize..200, lo in -500.0f64..500.0, width in 1.0f64..3000.0) {
            let grid: Vec<f64> = (0..n).map(|i| lo + width * i as f64 / (n - 1) as f64).collect();
            let b = bspline_basis(&grid, k).unwrap();
            for r in 0..n {
                prop_assert!((b.matrix.row(r).sum() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn affine_relabeling_leaves_matrix_unchanged(k in 4usize..20, a in 0.1f64..10.0, shift in -100.0f64..100.0) {
            let grid: Vec<f64> = (0..60).map(f64::from).collect();
            let moved: Vec<f64> = grid.iter().map(|t| a * t + shift).collect();
            let b1 = bspline_basis(&grid, k).unwrap();
            let b2 = bspline_basis(&moved, k).unwrap();
            prop_assert!((b1.matrix - b2.matrix).amax() < 1e-10);
        }
    }

    #[test]
    fn full_basis_interpolates() {
        let grid: Vec<f64> = (0..8).map(f64::from).collect();
        let b = bspline_basis(&grid, 8).unwrap();
        let y = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.7, 1.2]);
        let fit = ols(&b.matrix, &y).unwrap();
        assert!((fit.fitted - y).amax() < 1e-9);
    }

    #[test]
    fn constant_series_falls_back_to_minimum() {
        let s = TimeSeries::from_dense("t", 1900, vec![0.2; 101]).unwrap();
        let sel = select_k(&s, 0.7, 2000).unwrap();
        assert_eq!(sel.k_calibration, 4);
        assert!(sel.flagged);
    }

    #[test]
    fn density_preserving_scaling() {
        // six bases over the 1900-2000 calibration → 120 over 2000 years, five → 100
        assert_eq!(scale_basis_count(6, 101, 2000), 120);
        assert_eq!(scale_basis_count(5, 101, 2000), 100);
    }

    #[test]
    fn recovers_small_basis_from_spline_draws() {
        let grid: Vec<f64> = (1900..=2000).map(f64::from).collect();
        let truth = bspline_basis(&grid, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coef = Normal::new(0.0, 1.0).unwrap();
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut hits = 0;
        for _ in 0..50 {
            let g = DVector::from_fn(6, |_, _| coef.sample(&mut rng));
            let y: Vec<f64> = (&truth.matrix * g).iter().map(|v| v + noise.sample(&mut rng)).collect();
            let s = TimeSeries::from_dense("t", 1900, y).unwrap();
            if select_k(&s, 0.7, 2000).unwrap().k_calibration <= 8 {
                hits += 1;
            }
        }
        assert!(hits >= 45, "{hits}/50");
    }
}
