//! Interval score, CRPS, MSE and the Butterworth smoothing comparison.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::timeseries::{TimeSeries, Year, YearRange};

/// Interval score of a central (1 − α) interval. A value on either bound
/// counts as covered.
pub fn interval_score(lower: f64, upper: f64, y: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("interval level α = {alpha} outside (0, 1)")));
    }
    if lower > upper {
        return Err(Error::invalid(format!("interval lower bound {lower} exceeds upper bound {upper}")));
    }
    let mut s = upper - lower;
    if y < lower {
        s += 2.0 / alpha * (lower - y);
    }
    if y > upper {
        s += 2.0 / alpha * (y - upper);
    }
    Ok(s)
}

/// Mean interval score over paired series.
pub fn mean_interval_score(lower: &[f64], upper: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    if lower.len() != y.len() || upper.len() != y.len() || y.is_empty() {
        return Err(Error::Dimension(format!(
            "interval score needs equal, non-empty series ({}, {}, {})",
            lower.len(),
            upper.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..y.len() {
        total += interval_score(lower[i], upper[i], y[i], alpha)?;
    }
    Ok(total / y.len() as f64)
}

/// Closed-form CRPS of N(μ, σ²) at `y`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("CRPS scale σ = {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok((y - mu).abs());
    }
    let z = (y - mu) / sigma;
    let n = Normal::standard();
    Ok(sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / PI.sqrt()))
}

/// Sample CRPS, `(1/n)Σ|xᵢ − y| − (1/2n²)ΣΣ|xᵢ − xⱼ|`, in O(n log n).
pub fn crps_samples(draws: &[f64], y: f64) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::invalid(format!("sample CRPS needs at least 2 draws, got {}", draws.len())));
    }
    if draws.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("sample CRPS draws must be finite"));
    }
    let n = draws.len() as f64;
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    // ΣΣ|xᵢ − xⱼ| = 2 Σ (2i − n − 1) x₍ᵢ₎ with 1-based i
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i + 1) as f64 - n - 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(abs - pair / (2.0 * n * n))
}

pub fn mse(prediction: &[f64], observed: &[f64]) -> Result<f64> {
    if prediction.len() != observed.len() || observed.is_empty() {
        return Err(Error::Dimension(format!(
            "MSE needs equal, non-empty series ({} vs {})",
            prediction.len(),
            observed.len()
        )));
    }
    Ok(prediction.iter().zip(observed).map(|(p, o)| (p - o).powi(2)).sum::<f64>() / observed.len() as f64)
}

/// Biquad `b0 + b1 z⁻¹ + b2 z⁻²` over `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II, started in steady state for a constant
    /// input equal to `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let g = self.dc_gain();
        let mut z1 = (g - self.b[0]) * x0;
        let mut z2 = (self.b[2] - self.a[1] * g) * x0;
        for v in x.iter_mut() {
            let input = *v;
            let out = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * out + z2;
            z2 = self.b[2] * input - self.a[1] * out;
            *v = out;
        }
    }
}

/// Digital Butterworth low-pass of even `order` as second-order sections,
/// by the bilinear transform with frequency prewarping. `cutoff` is in
/// cycles per sample.
pub fn butterworth_sections(order: usize, cutoff: f64) -> Result<Vec<Biquad>> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::invalid(format!("Butterworth order must be even and positive, got {order}")));
    }
    if !(cutoff > 0.0 && cutoff < 0.5) {
        return Err(Error::invalid(format!("cutoff {cutoff} must lie in (0, 0.5) cycles per sample")));
    }
    let k = 2.0;
    let wc = k * (PI * cutoff).tan();
    let n = order as f64;
    Ok((1..=order / 2)
        .map(|j| {
            // analog pole pair wc·exp(±iθ) in the left half plane
            let theta = PI * (2.0 * j as f64 + n - 1.0) / (2.0 * n);
            let re = wc * theta.cos();
            let m2 = wc * wc;
            let a0 = k * k - 2.0 * re * k + m2;
            let a1 = 2.0 * m2 - 2.0 * k * k;
            let a2 = k * k + 2.0 * re * k + m2;
            Biquad {
                b: [m2 / a0, 2.0 * m2 / a0, m2 / a0],
                a: [a1 / a0, a2 / a0],
            }
        })
        .collect())
}

/// Zero-phase Butterworth low-pass: the cascade runs forward then backward
/// over the series extended by odd reflection of `3·order` samples at each
/// end.
pub fn butterworth_lowpass(series: &TimeSeries, cutoff_period: f64, order: usize) -> Result<TimeSeries> {
    if !(cutoff_period > 2.0) {
        return Err(Error::invalid(format!("cutoff period {cutoff_period} must exceed 2 samples")));
    }
    let x = series.dense(series.range())?;
    let pad = 3 * order;
    if x.len() <= 6 * order {
        return Err(Error::invalid(format!(
            "`{}` has {} years; the filter needs more than {}",
            series.name(),
            x.len(),
            6 * order
        )));
    }
    let sections = butterworth_sections(order, 1.0 / cutoff_period)?;
    let (first, last) = (x[0], x[x.len() - 1]);
    let mut ext: Vec<f64> = (1..=pad).rev().map(|i| 2.0 * first - x[i]).collect();
    ext.extend_from_slice(&x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[x.len() - 1 - i]));
    for s in &sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in &sections {
        s.run(&mut ext);
    }
    ext.reverse();
    TimeSeries::from_dense(format!("{}_lowpass", series.name()), series.start_year(), ext[pad..pad + x.len()].to_vec())
}

/// Predictive summary of one validation year.
#[derive(Clone, Debug, PartialEq)]
pub struct YearForecast {
    pub year: Year,
    pub mean: f64,
    /// Central 80% interval.
    pub interval80: (f64, f64),
    /// Central 95% interval.
    pub interval95: (f64, f64),
    pub draws: Vec<f64>,
}

/// Low-passed comparison target and the years it is scored over.
#[derive(Clone, Debug)]
pub struct SmoothedReference<'a> {
    pub series: &'a TimeSeries,
    pub window: YearRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub n_nests: usize,
    pub method: String,
    pub window: YearRange,
    pub is80: f64,
    pub is95: f64,
    pub crps: f64,
    pub mse: f64,
    pub mse_smoothed: Option<f64>,
}

/// Labels carried into a [`ScoreReport`].
#[derive(Clone, Debug)]
pub struct ScoreTag {
    pub model: String,
    pub n_nests: usize,
    pub method: String,
}

/// Scores `forecasts` against `observed` over `window`. `training` is the
/// span whose observations informed the fit; any overlap with `window` is
/// refused. With a smoothed reference, the low-passed `reconstruction_mean`
/// is also compared with it.
pub fn validation_suite(
    tag: ScoreTag,
    forecasts: &[YearForecast],
    reconstruction_mean: &TimeSeries,
    observed: &TimeSeries,
    window: YearRange,
    training: YearRange,
    smoothed: Option<SmoothedReference<'_>>,
) -> Result<ScoreReport> {
    if window.overlaps(&training) {
        return Err(Error::Config(format!(
            "refusing to score: validation window {window} overlaps the training window {training}"
        )));
    }
    let mut rows = Vec::with_capacity(window.len());
    for year in window.years() {
        let f = forecasts
            .iter()
            .find(|f| f.year == year)
            .ok_or_else(|| Error::Coverage(format!("no forecast for validation year {year}")))?;
        let y = observed
            .get(year)
            .ok_or_else(|| Error::Coverage(format!("`{}` has no value for validation year {year}", observed.name())))?;
        rows.push((f, y));
    }
    let n = rows.len() as f64;
    let mut is80 = 0.0;
    let mut is95 = 0.0;
    let mut crps = 0.0;
    for (f, y) in &rows {
        is80 += interval_score(f.interval80.0, f.interval80.1, *y, 0.2)?;
        is95 += interval_score(f.interval95.0, f.interval95.1, *y, 0.05)?;
        crps += crps_samples(&f.draws, *y)?;
    }
    let means: Vec<f64> = rows.iter().map(|(f, _)| f.mean).collect();
    let ys: Vec<f64> = rows.iter().map(|(_, y)| *y).collect();
    let mse_smoothed = match smoothed {
        None => None,
        Some(r) => {
            let low = butterworth_lowpass(reconstruction_mean, 100.0, 4)?;
            let pred = low.dense(r.window)?;
            let obs = r.series.dense(r.window)?;
            Some(mse(&pred, &obs)?)
        }
    };
    let report = ScoreReport {
        model: tag.model,
        n_nests: tag.n_nests,
        method: tag.method,
        window,
        is80: is80 / n,
        is95: is95 / n,
        crps: crps / n,
        mse: mse(&means, &ys)?,
        mse_smoothed,
    };
    let all = [report.is80, report.is95, report.crps, report.mse, report.mse_smoothed.unwrap_or(0.0)];
    if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical(format!("non-finite or negative score in {report:?}")));
    }
    Ok(report)
}

/// Score table with columns `(model, n_nests, method, is80, is95, crps, mse, mse_smoothed)`.
pub fn write_scores_csv<W: Write>(out: W, reports: &[ScoreReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "n_nests", "method", "is80", "is95", "crps", "mse", "mse_smoothed"])?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            r.n_nests.to_string(),
            r.method.clone(),
            r.is80.to_string(),
            r.is95.to_string(),
            r.crps.to_string(),
            r.mse.to_string(),
            r.mse_smoothed.map_or_else(String::new, |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn interval_score_cases() {
        assert_eq!(interval_score(0.0, 1.0, 0.5, 0.2).unwrap(), 1.0);
        assert_eq!(interval_score(0.0, 1.0, 1.5, 0.2).unwrap(), 6.0);
        assert_eq!(interval_score(0.0, 1.0, 0.0, 0.2).unwrap(), 1.0);
        assert_eq!(interval_score(0.0, 1.0, 1.0, 0.2).unwrap(), 1.0);
        assert_abs_diff_eq!(interval_score(0.0, 1.0, -1.0, 0.05).unwrap(), 41.0, epsilon = 1e-12);
        assert!(interval_score(1.0, 0.0, 0.5, 0.2).is_err());
        assert!(interval_score(0.0, 1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn crps_cases() {
        assert_eq!(crps_gaussian(1.0, 0.0, 3.5).unwrap(), 2.5);
        assert!(crps_gaussian(0.0, -1.0, 0.0).is_err());
        assert_eq!(crps_samples(&[0.0, 2.0], 1.0).unwrap(), 0.5);
        assert_eq!(crps_samples(&[4.0; 5], 4.0).unwrap(), 0.0);
        assert!(crps_samples(&[1.0], 1.0).is_err());
    }

    #[test]
    fn sorted_crps_matches_double_sum() {
        let x: [f64; 7] = [0.3, -1.2, 2.5, 0.0, 0.7, 0.7, -0.4];
        let y: f64 = 0.25;
        let n = x.len() as f64;
        let a: f64 = x.iter().map(|v| (v - y).abs()).sum::<f64>() / n;
        let b: f64 = x.iter().flat_map(|u| x.iter().map(move |v| (u - v).abs())).sum::<f64>();
        assert_abs_diff_eq!(crps_samples(&x, y).unwrap(), a - b / (2.0 * n * n), epsilon = 1e-14);
    }

    #[test]
    fn sections_have_unit_dc_gain() {
        for s in butterworth_sections(4, 0.01).unwrap() {
            assert_abs_diff_eq!(s.dc_gain(), 1.0, epsilon = 1e-12);
        }
        assert!(butterworth_sections(3, 0.01).is_err());
        assert!(butterworth_sections(4, 0.6).is_err());
    }

    #[test]
    fn short_series_is_rejected() {
        let s = TimeSeries::from_dense("x", 1, vec![1.0; 24]).unwrap();
        assert!(butterworth_lowpass(&s, 100.0, 4).is_err());
        let s = TimeSeries::from_dense("x", 1, vec![1.0; 25]).unwrap();
        assert!(butterworth_lowpass(&s, 100.0, 4).is_ok());
    }
}
