//! Seeded K-fold cross-validation over an ordered hyperparameter grid.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CvOutcome {
    /// Index of the selected grid value.
    pub index: usize,
    /// Mean out-of-fold squared error per grid value.
    pub errors: Vec<f64>,
}

/// Fold label for each of `n` rows, from a seeded shuffle.
pub fn fold_labels(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        labels[row] = pos % folds;
    }
    labels
}

/// Selects the grid value with the smallest mean out-of-fold squared error.
///
/// `grid_len` values are assumed ordered from the simplest model to the most
/// complex; exact ties resolve to the simpler one. For each fold,
/// `fit_predict(train_rows, test_rows)` returns held-out predictions for every
/// grid value, which lets callers reuse warm-started solution paths.
pub fn cv_select<F>(
    y: &DVector<f64>,
    grid_len: usize,
    folds: usize,
    seed: u64,
    mut fit_predict: F,
) -> Result<CvOutcome>
where
    F: FnMut(&[usize], &[usize]) -> Result<Vec<DVector<f64>>>,
{
    if grid_len == 0 {
        return Err(Error::invalid("cross-validation grid is empty"));
    }
    let n = y.len();
    if folds < 2 || n < folds {
        return Err(Error::invalid(format!(
            "{folds}-fold cross-validation needs at least {folds} rows, got {n}"
        )));
    }
    let labels = fold_labels(n, folds, seed);
    let mut sse = vec![0.0; grid_len];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
        let preds = fit_predict(&train, &test)?;
        if preds.len() != grid_len {
            return Err(Error::Dimension(format!(
                "fold returned {} prediction sets for a grid of {grid_len}",
                preds.len()
            )));
        }
        for (g, p) in preds.iter().enumerate() {
            for (k, &row) in test.iter().enumerate() {
                sse[g] += (y[row] - p[k]).powi(2);
            }
        }
    }
    let errors: Vec<f64> = sse.iter().map(|s| s / n as f64).collect();
    let mut index = 0;
    for (g, e) in errors.iter().enumerate() {
        if *e < errors[index] {
            index = g;
        }
    }
    Ok(CvOutcome { index, errors })
}
