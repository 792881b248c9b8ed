//! Plain-CSV ingestion and emission of proxies, forcings and temperatures.
//!
//! Proxy files are long-format `(year, proxy_id, value)`, forcing files
//! `(year, solar, volcanic, co2)` and temperature files `(year, anomaly)`.
//! An empty field marks a missing value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::timeseries::{TimeSeries, Year};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

fn header_check(r: &csv::StringRecord, expected: &[&str], what: &str) -> Result<()> {
    let got: Vec<String> = r.iter().map(|s| s.trim().to_ascii_lowercase()).collect();
    if got != expected {
        return Err(Error::invalid(format!(
            "{what} header is `{}`, expected `{}`",
            got.join(","),
            expected.join(",")
        )));
    }
    Ok(())
}

fn parse_year(s: &str, line: u64) -> Result<Year> {
    s.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("line {line}: `{s}` is not an integer year")))
}

fn parse_value(s: &str, line: u64) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::invalid(format!("line {line}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::invalid(format!("line {line}: non-finite value `{s}`")));
    }
    Ok(Some(v))
}

/// Assembles a contiguous series from `(year, value)` pairs; absent years
/// become missing.
fn series_from_pairs(name: &str, pairs: &BTreeMap<Year, Option<f64>>) -> Result<TimeSeries> {
    let (&start, _) = pairs
        .first_key_value()
        .ok_or_else(|| Error::invalid(format!("`{name}` has no rows")))?;
    let (&end, _) = pairs.last_key_value().expect("non-empty");
    let values = (start..=end).map(|y| pairs.get(&y).copied().flatten()).collect();
    TimeSeries::new(name, start, values)
}

/// Reads a long-format proxy table. Series come back sorted by proxy id.
pub fn read_proxies<R: Read>(input: R) -> Result<Vec<TimeSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    header_check(rdr.headers()?, &["year", "proxy_id", "value"], "proxy file")?;
    let mut by_id: BTreeMap<String, BTreeMap<Year, Option<f64>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let year = parse_year(&rec[0], line)?;
        let id = rec[1].to_string();
        if id.is_empty() {
            return Err(Error::invalid(format!("line {line}: empty proxy id")));
        }
        let v = parse_value(&rec[2], line)?;
        if by_id.entry(id.clone()).or_default().insert(year, v).is_some() {
            return Err(Error::invalid(format!("line {line}: duplicate year {year} for `{id}`")));
        }
    }
    by_id.iter().map(|(id, pairs)| series_from_pairs(id, pairs)).collect()
}

/// Raw forcing columns as read from disk.
#[derive(Clone, Debug)]
pub struct RawForcings {
    pub solar: TimeSeries,
    pub volcanic: TimeSeries,
    pub co2: TimeSeries,
}

pub fn read_forcings<R: Read>(input: R) -> Result<RawForcings> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    header_check(rdr.headers()?, &["year", "solar", "volcanic", "co2"], "forcing file")?;
    let mut cols: [BTreeMap<Year, Option<f64>>; 3] = Default::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let year = parse_year(&rec[0], line)?;
        for (j, col) in cols.iter_mut().enumerate() {
            if col.insert(year, parse_value(&rec[j + 1], line)?).is_some() {
                return Err(Error::invalid(format!("line {line}: duplicate year {year}")));
            }
        }
    }
    Ok(RawForcings {
        solar: series_from_pairs("solar", &cols[0])?,
        volcanic: series_from_pairs("volcanic", &cols[1])?,
        co2: series_from_pairs("co2", &cols[2])?,
    })
}

pub fn read_temperature<R: Read>(input: R) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    header_check(rdr.headers()?, &["year", "anomaly"], "temperature file")?;
    let mut pairs = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let year = parse_year(&rec[0], line)?;
        if pairs.insert(year, parse_value(&rec[1], line)?).is_some() {
            return Err(Error::invalid(format!("line {line}: duplicate year {year}")));
        }
    }
    series_from_pairs("temperature", &pairs)
}

pub fn read_proxies_file(path: &Path) -> Result<Vec<TimeSeries>> {
    read_proxies(open(path)?)
}

pub fn read_forcings_file(path: &Path) -> Result<RawForcings> {
    read_forcings(open(path)?)
}

pub fn read_temperature_file(path: &Path) -> Result<TimeSeries> {
    read_temperature(open(path)?)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes proxies in long format; missing years are skipped.
pub fn write_proxies<W: Write>(out: W, proxies: &[TimeSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["year", "proxy_id", "value"])?;
    for p in proxies {
        for (y, v) in p.observed() {
            w.write_record([y.to_string(), p.name().to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_forcings<W: Write>(out: W, raw: &RawForcings) -> Result<()> {
    let range = raw.solar.range();
    if raw.volcanic.range() != range || raw.co2.range() != range {
        return Err(Error::Coverage("forcing columns cover different years".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["year", "solar", "volcanic", "co2"])?;
    for y in range.years() {
        w.write_record([y.to_string(), fmt(raw.solar.get(y)), fmt(raw.volcanic.get(y)), fmt(raw.co2.get(y))])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_temperature<W: Write>(out: W, series: &TimeSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["year", "anomaly"])?;
    for (y, v) in series.iter() {
        w.write_record([y.to_string(), fmt(v)])?;
    }
    w.flush()?;
    Ok(())
}
