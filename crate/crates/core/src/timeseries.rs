//! Annual time series, proxy screening, nest assembly and forcing transforms.

use std::fmt;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub type Year = i32;

/// First and last year of the supported reconstruction interval.
pub const FIRST_YEAR: Year = 1;
pub const LAST_YEAR: Year = 2000;
/// Width of one availability nest in years.
pub const NEST_WIDTH: Year = 250;
pub const NEST_COUNT: usize = 8;

/// Inclusive range of calendar years.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct YearRange {
    pub start: Year,
    pub end: Year,
}

impl YearRange {
    pub fn new(start: Year, end: Year) -> Result<Self> {
        if end < start {
            return Err(Error::invalid(format!(
                "empty year range {start}..={end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, year: Year) -> bool {
        year >= self.start && year <= self.end
    }

    pub fn overlaps(&self, other: &YearRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn covers(&self, other: &YearRange) -> bool {
        self.start <= other.start && self.end >= other.end
    }

    pub fn years(&self) -> impl Iterator<Item = Year> {
        self.start..=self.end
    }
}

impl fmt::Display for YearRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

/// Annual series on a contiguous year index. `None` marks a missing year.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    name: String,
    start_year: Year,
    values: Vec<Option<f64>>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, start_year: Year, values: Vec<Option<f64>>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::invalid(format!("series `{name}` has no values")));
        }
        if let Some(i) = values.iter().position(|v| matches!(v, Some(x) if !x.is_finite())) {
            return Err(Error::Domain {
                series: name,
                year: start_year + i as Year,
                reason: "non-finite value".into(),
            });
        }
        Ok(Self {
            name,
            start_year,
            values,
        })
    }

    /// Series with every year observed.
    pub fn from_dense(name: impl Into<String>, start_year: Year, values: Vec<f64>) -> Result<Self> {
        Self::new(name, start_year, values.into_iter().map(Some).collect())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn start_year(&self) -> Year {
        self.start_year
    }

    pub fn end_year(&self) -> Year {
        self.start_year + self.values.len() as Year - 1
    }

    pub fn range(&self) -> YearRange {
        YearRange {
            start: self.start_year,
            end: self.end_year(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    /// Value at `year`; years outside the index read as missing.
    pub fn get(&self, year: Year) -> Option<f64> {
        if year < self.start_year || year > self.end_year() {
            return None;
        }
        self.values[(year - self.start_year) as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Year, Option<f64>)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, v)| (self.start_year + i as Year, *v))
    }

    pub fn observed(&self) -> impl Iterator<Item = (Year, f64)> + '_ {
        self.iter().filter_map(|(y, v)| v.map(|x| (y, x)))
    }

    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn first_observed_year(&self) -> Option<Year> {
        self.observed().next().map(|(y, _)| y)
    }

    pub fn last_observed_year(&self) -> Option<Year> {
        self.values
            .iter()
            .rposition(|v| v.is_some())
            .map(|i| self.start_year + i as Year)
    }

    /// Restriction (or extension, with missing padding) to `range`.
    pub fn window(&self, range: YearRange) -> TimeSeries {
        TimeSeries {
            name: self.name.clone(),
            start_year: range.start,
            values: range.years().map(|y| self.get(y)).collect(),
        }
    }

    /// Dense values over `range`; fails if any year is missing.
    pub fn dense(&self, range: YearRange) -> Result<Vec<f64>> {
        range
            .years()
            .map(|y| {
                self.get(y).ok_or_else(|| {
                    Error::Coverage(format!("`{}` is missing year {y}", self.name))
                })
            })
            .collect()
    }

    /// Linear interpolation across interior gaps. Leading and trailing gaps stay missing.
    pub fn infill_linear(&self) -> TimeSeries {
        let mut out = self.values.clone();
        let mut prev: Option<(usize, f64)> = None;
        for i in 0..out.len() {
            if let Some(v) = self.values[i] {
                if let Some((j, pv)) = prev {
                    let gap = i - j;
                    for k in 1..gap {
                        let w = k as f64 / gap as f64;
                        out[j + k] = Some(pv + w * (v - pv));
                    }
                }
                prev = Some((i, v));
            }
        }
        TimeSeries {
            name: self.name.clone(),
            start_year: self.start_year,
            values: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TimeSeries {
        TimeSeries {
            name: self.name.clone(),
            start_year: self.start_year,
            values: self.values.iter().map(|v| v.map(&f)).collect(),
        }
    }

    /// Mean and population standard deviation of the observed values in `range`.
    pub fn moments(&self, range: YearRange) -> Option<(f64, f64)> {
        let xs: Vec<f64> = range.years().filter_map(|y| self.get(y)).collect();
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }
}

/// Raw and transformed radiative forcings on a common, fully observed year index.
#[derive(Clone, Debug)]
pub struct ForcingSet {
    pub solar: TimeSeries,
    pub volcanic_raw: TimeSeries,
    pub co2_raw: TimeSeries,
    pub volcanic_transformed: TimeSeries,
    pub co2_transformed: TimeSeries,
}

impl ForcingSet {
    pub fn range(&self) -> YearRange {
        self.solar.range()
    }

    /// The three process-level covariates (S, Ṽ, C̃) in model order.
    pub fn covariates(&self) -> [&TimeSeries; 3] {
        [&self.solar, &self.volcanic_transformed, &self.co2_transformed]
    }
}

/// Group of proxies whose records start within one 250-year interval.
#[derive(Clone, Debug)]
pub struct ProxyNest {
    pub index: usize,
    pub interval: YearRange,
    pub members: Vec<TimeSeries>,
    pub calibration: YearRange,
    /// Calibration-window proxy matrix, column-standardized (rows = years).
    pub calibration_matrix: DMatrix<f64>,
    pub column_means: Vec<f64>,
    pub column_sds: Vec<f64>,
}

impl ProxyNest {
    pub fn interval_for(index: usize) -> YearRange {
        let k = index as Year;
        YearRange {
            start: (k - 1) * NEST_WIDTH + 1,
            end: k * NEST_WIDTH,
        }
    }

    pub fn new(index: usize, members: Vec<TimeSeries>, calibration: YearRange) -> Result<Self> {
        if !(1..=NEST_COUNT).contains(&index) {
            return Err(Error::invalid(format!("nest index {index} outside 1..=8")));
        }
        let interval = Self::interval_for(index);
        let mut column_means = Vec::with_capacity(members.len());
        let mut column_sds = Vec::with_capacity(members.len());
        for m in &members {
            let first = m
                .first_observed_year()
                .ok_or_else(|| Error::DegenerateSeries(m.name().to_string()))?;
            if !interval.contains(first) {
                return Err(Error::invalid(format!(
                    "`{}` starts in {first}, outside nest {index} ({interval})",
                    m.name()
                )));
            }
            let filled = m.infill_linear();
            let (mean, sd) = filled
                .moments(calibration)
                .ok_or_else(|| Error::Coverage(format!("`{}` has no calibration data", m.name())))?;
            if sd <= 0.0 {
                return Err(Error::invalid(format!(
                    "`{}` is constant over the calibration window",
                    m.name()
                )));
            }
            column_means.push(mean);
            column_sds.push(sd);
        }
        let mut nest = ProxyNest {
            index,
            interval,
            members,
            calibration,
            calibration_matrix: DMatrix::zeros(0, 0),
            column_means,
            column_sds,
        };
        nest.calibration_matrix = nest.design_matrix(calibration)?;
        Ok(nest)
    }

    /// Observation window of this nest's reduced proxy: from the nest start
    /// (or its earliest member record, if later) through the calibration end.
    pub fn observation_window(&self) -> YearRange {
        let earliest = self
            .members
            .iter()
            .filter_map(|m| m.first_observed_year())
            .min()
            .unwrap_or(self.interval.start);
        YearRange {
            start: earliest.max(self.interval.start),
            end: self.calibration.end,
        }
    }

    /// Standardized proxy matrix over `range`. Interior gaps are linearly
    /// interpolated; years before a member's first (or after its last)
    /// observation are imputed at the calibration mean, i.e. zero.
    pub fn design_matrix(&self, range: YearRange) -> Result<DMatrix<f64>> {
        let filled: Vec<TimeSeries> = self.members.iter().map(|m| m.infill_linear()).collect();
        let mut x = DMatrix::zeros(range.len(), self.members.len());
        for (r, year) in range.years().enumerate() {
            let mut any = self.members.is_empty();
            for (c, m) in filled.iter().enumerate() {
                if let Some(v) = m.get(year) {
                    x[(r, c)] = (v - self.column_means[c]) / self.column_sds[c];
                    any = true;
                }
            }
            if !any {
                return Err(Error::Coverage(format!(
                    "nest {}: every member is missing in year {year}",
                    self.index
                )));
            }
        }
        Ok(x)
    }
}

/// Rank-based mapping onto standard-normal quantiles; ties receive average ranks.
pub fn normal_score_transform(series: &TimeSeries) -> Result<TimeSeries> {
    let obs: Vec<(usize, f64)> = series
        .values()
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    let n = obs.len();
    if n < 2 {
        return Err(Error::DegenerateSeries(series.name().to_string()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| obs[a].1.total_cmp(&obs[b].1));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && obs[order[j + 1]].1 == obs[order[i]].1 {
            j += 1;
        }
        // ranks are 1-based; a tie block i..=j shares the mean rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut values = vec![None; series.len()];
    for (k, &(idx, _)) in obs.iter().enumerate() {
        let p = (ranks[k] - 0.5) / n as f64;
        values[idx] = Some(std_normal.inverse_cdf(p));
    }
    TimeSeries::new(series.name(), series.start_year(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScreenDecision {
    Keep,
    Drop,
}

/// Drops a series whose missing fraction over `window` exceeds `max_ratio`.
pub fn screen_missing(series: &TimeSeries, window: YearRange, max_ratio: f64) -> Result<ScreenDecision> {
    if window.len() == 0 {
        return Err(Error::invalid("empty screening window"));
    }
    let missing = window.years().filter(|&y| series.get(y).is_none()).count();
    let ratio = missing as f64 / window.len() as f64;
    Ok(if ratio > max_ratio {
        ScreenDecision::Drop
    } else {
        ScreenDecision::Keep
    })
}

/// Pearson correlation and two-sided p-value (t test with n-2 df) on paired values.
pub fn pearson_test(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} vs {} values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::invalid("correlation test needs at least 3 pairs"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, 1.0));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    if 1.0 - r * r <= f64::EPSILON {
        return Ok((r, 0.0));
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((r, p.clamp(0.0, 1.0)))
}

/// Benjamini–Hochberg step-up rule: `true` marks a rejected (kept) hypothesis.
pub fn benjamini_hochberg(p_values: &[f64], level: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut cutoff = 0;
    for (k, &i) in order.iter().enumerate() {
        if p_values[i] <= (k + 1) as f64 * level / m as f64 {
            cutoff = k + 1;
        }
    }
    let mut keep = vec![false; m];
    for &i in &order[..cutoff] {
        keep[i] = true;
    }
    keep
}

/// Minimum number of overlapping years for a correlation screen.
pub const MIN_OVERLAP: usize = 10;

#[derive(Clone, Debug)]
pub struct CorrelationScreen {
    /// Indices into the input proxy list that pass the screen.
    pub kept: Vec<usize>,
    /// Per-proxy (correlation, p-value); `None` when excluded for short overlap.
    pub tests: Vec<Option<(f64, f64)>>,
}

/// Correlation screen against `target` over `window` with FDR control.
pub fn screen_correlation(
    proxies: &[TimeSeries],
    target: &TimeSeries,
    window: YearRange,
    fdr_level: f64,
) -> Result<CorrelationScreen> {
    if !(0.0..=1.0).contains(&fdr_level) {
        return Err(Error::invalid(format!("fdr level {fdr_level} outside [0, 1]")));
    }
    let mut tests = Vec::with_capacity(proxies.len());
    for p in proxies {
        let (xs, ys): (Vec<f64>, Vec<f64>) = window
            .years()
            .filter_map(|y| Some((p.get(y)?, target.get(y)?)))
            .unzip();
        if xs.len() < MIN_OVERLAP {
            warn!(
                "proxy `{}` overlaps the target on {} years (< {MIN_OVERLAP}); excluded",
                p.name(),
                xs.len()
            );
            tests.push(None);
            continue;
        }
        tests.push(Some(pearson_test(&xs, &ys)?));
    }
    let tested: Vec<usize> = (0..proxies.len()).filter(|&i| tests[i].is_some()).collect();
    let pvals: Vec<f64> = tested.iter().map(|&i| tests[i].unwrap().1).collect();
    let decisions = benjamini_hochberg(&pvals, fdr_level);
    let kept = tested
        .iter()
        .zip(decisions)
        .filter_map(|(&i, keep)| keep.then_some(i))
        .collect();
    Ok(CorrelationScreen { kept, tests })
}

/// Nest index (1-based) for a record whose first observation falls in `year`.
pub fn nest_index_for(year: Year) -> Result<usize> {
    if !(FIRST_YEAR..=LAST_YEAR).contains(&year) {
        return Err(Error::YearOutOfRange(year));
    }
    Ok(((year + NEST_WIDTH - 1) / NEST_WIDTH) as usize)
}

/// Partitions screened proxies into the eight availability nests.
pub fn assign_nests(proxies: &[TimeSeries], calibration: YearRange) -> Result<Vec<ProxyNest>> {
    let mut groups: Vec<Vec<TimeSeries>> = vec![Vec::new(); NEST_COUNT];
    for p in proxies {
        let first = p
            .first_observed_year()
            .ok_or_else(|| Error::DegenerateSeries(p.name().to_string()))?;
        let k = nest_index_for(first)?;
        let last = p.last_observed_year().unwrap_or(first);
        if last < calibration.end {
            return Err(Error::Coverage(format!(
                "`{}` ends in {last}, before the calibration end {}",
                p.name(),
                calibration.end
            )));
        }
        groups[k - 1].push(p.clone());
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, members)| ProxyNest::new(i + 1, members, calibration))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Centering {
    /// Subtract the calibration-window mean from each transformed covariate.
    Calibration,
    None,
}

/// Builds Ṽ = log(1 - V) and C̃ = log C, then centers S, Ṽ, C̃ as requested.
pub fn transform_forcings(
    solar: &TimeSeries,
    volcanic_raw: &TimeSeries,
    co2_raw: &TimeSeries,
    calibration: YearRange,
    centering: Centering,
) -> Result<ForcingSet> {
    let range = solar.range();
    for s in [volcanic_raw, co2_raw] {
        if s.range() != range {
            return Err(Error::Coverage(format!(
                "`{}` covers {} but solar covers {range}",
                s.name(),
                s.range()
            )));
        }
    }
    for s in [solar, volcanic_raw, co2_raw] {
        if let Some((y, _)) = s.iter().find(|(_, v)| v.is_none()) {
            return Err(Error::Coverage(format!("`{}` is missing year {y}", s.name())));
        }
    }
    for (y, v) in co2_raw.observed() {
        if v <= 0.0 {
            return Err(Error::Domain {
                series: co2_raw.name().into(),
                year: y,
                reason: format!("CO2 concentration {v} must be positive"),
            });
        }
    }
    for (y, v) in volcanic_raw.observed() {
        if v > 0.0 {
            return Err(Error::Domain {
                series: volcanic_raw.name().into(),
                year: y,
                reason: format!("volcanic forcing {v} must be non-positive"),
            });
        }
    }
    let center = |s: TimeSeries| -> Result<TimeSeries> {
        match centering {
            Centering::None => Ok(s),
            Centering::Calibration => {
                let (m, _) = s.moments(calibration).ok_or_else(|| {
                    Error::Coverage(format!("`{}` does not cover {calibration}", s.name()))
                })?;
                Ok(s.map(|v| v - m))
            }
        }
    };
    Ok(ForcingSet {
        solar: center(solar.clone())?,
        volcanic_transformed: center(volcanic_raw.map(|v| (1.0 - v).ln()).with_name("volcanic_transformed"))?,
        co2_transformed: center(co2_raw.map(f64::ln).with_name("co2_transformed"))?,
        volcanic_raw: volcanic_raw.clone(),
        co2_raw: co2_raw.clone(),
    })
}
