//! Day-ahead price ingestion.
//!
//! Files carry one row per hour with header `timestamp,price_eur_mwh`. Internally
//! prices are held in currency per Wh so that `power [W] * price * dt [h]` is money.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime};

use crate::error::{Error, Result};

/// Conversion factor from currency per MWh (file) to currency per Wh (internal).
pub const PER_MWH_TO_PER_WH: f64 = 1e-6;

pub const HOUR_S: f64 = 3600.0;

/// Supported on-disk price layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriceFormat {
    /// CSV, header `timestamp,price_eur_mwh`, ISO-8601 timestamps, hourly rows.
    #[default]
    HourlyCsv,
}

/// Hourly price signal, zero-order hold between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    start: NaiveDateTime,
    prices: Vec<f64>,
}

impl PriceSeries {
    /// Builds a series from prices already in currency per Wh.
    pub fn new(start: NaiveDateTime, prices: Vec<f64>) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::Schema("price series is empty".into()));
        }
        if let Some(i) = prices.iter().position(|p| !p.is_finite()) {
            return Err(Error::Schema(format!("price at hour {i} is not finite")));
        }
        Ok(Self { start, prices })
    }

    /// Convenience constructor from currency-per-MWh values starting at 2014-01-01 00:00.
    pub fn from_eur_per_mwh(values: &[f64]) -> Result<Self> {
        let start = default_start();
        Self::new(start, values.iter().map(|v| v * PER_MWH_TO_PER_WH).collect())
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    /// Step between samples in seconds (always one hour).
    pub fn step_s(&self) -> f64 {
        HOUR_S
    }

    /// Prices in currency per Wh.
    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Horizon covered by the series in seconds.
    pub fn horizon_s(&self) -> f64 {
        self.prices.len() as f64 * HOUR_S
    }

    /// Price of the hour containing `t_s` seconds after the start.
    pub fn price_at(&self, t_s: f64) -> Result<f64> {
        if !(t_s >= 0.0 && t_s < self.horizon_s()) {
            return Err(Error::Range(format!(
                "t = {t_s} s outside price horizon [0, {})",
                self.horizon_s()
            )));
        }
        let idx = (t_s / HOUR_S).floor() as usize;
        Ok(self.prices[idx.min(self.prices.len() - 1)])
    }

    /// Sub-series of `hours` hours starting at hour `first_hour`.
    pub fn slice_hours(&self, first_hour: usize, hours: usize) -> Result<PriceSeries> {
        let end = first_hour + hours;
        if hours == 0 || end > self.prices.len() {
            return Err(Error::Range(format!(
                "hours [{first_hour}, {end}) outside series of {} hours",
                self.prices.len()
            )));
        }
        Ok(PriceSeries {
            start: self.start + Duration::hours(first_hour as i64),
            prices: self.prices[first_hour..end].to_vec(),
        })
    }
}

pub(crate) fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2014, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt);
        }
    }
    None
}

/// Loads an hourly price file.
pub fn load_prices(path: impl AsRef<Path>, format: PriceFormat) -> Result<PriceSeries> {
    let path = path.as_ref();
    match format {
        PriceFormat::HourlyCsv => load_hourly_csv(path),
    }
}

fn load_hourly_csv(path: &Path) -> Result<PriceSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "timestamp" || &headers[1] != "price_eur_mwh" {
        return Err(Error::Schema(format!(
            "{}: expected header `timestamp,price_eur_mwh`, found `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut start: Option<NaiveDateTime> = None;
    let mut prev: Option<NaiveDateTime> = None;
    let mut prices = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != 2 {
            return Err(parse_err(line, format!("expected 2 fields, found {}", record.len())));
        }
        let ts = parse_timestamp(&record[0])
            .ok_or_else(|| parse_err(line, format!("bad timestamp `{}`", &record[0])))?;
        let value: f64 = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("bad price `{}`", &record[1])))?;
        if !value.is_finite() {
            return Err(parse_err(line, "price is not finite".into()));
        }
        if let Some(p) = prev {
            let expected = p + Duration::hours(1);
            if ts < expected {
                return Err(Error::Schema(format!(
                    "{}: line {line}: duplicate or out-of-order hour {ts}",
                    path.display()
                )));
            }
            if ts > expected {
                return Err(Error::Schema(format!(
                    "{}: line {line}: gap, missing hour {expected}",
                    path.display()
                )));
            }
        }
        start.get_or_insert(ts);
        prev = Some(ts);
        prices.push(value * PER_MWH_TO_PER_WH);
    }

    let start = start.ok_or_else(|| Error::Schema(format!("{}: no price rows", path.display())))?;
    PriceSeries::new(start, prices)
}

/// File value (currency per MWh) that reloads to exactly `per_wh`.
fn to_file_units(per_wh: f64) -> f64 {
    let mut v = per_wh / PER_MWH_TO_PER_WH;
    for _ in 0..8 {
        let back = v * PER_MWH_TO_PER_WH;
        if back == per_wh {
            break;
        }
        v = if back < per_wh { next_up(v) } else { next_down(v) };
    }
    v
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Writes a series in the hourly CSV layout.
pub fn write_prices(series: &PriceSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "timestamp,price_eur_mwh")?;
        for (i, p) in series.prices.iter().enumerate() {
            let ts = series.start + Duration::hours(i as i64);
            writeln!(out, "{},{}", ts.format("%Y-%m-%dT%H:%M:%S"), to_file_units(*p))?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Deterministic synthetic day-ahead prices (currency per MWh): a two-peak daily
/// shape, a weekly weekend dip and a pseudo-random hourly perturbation.
pub fn synthetic_prices_eur_mwh(hours: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        // 64-bit LCG, top 53 bits
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..hours)
        .map(|h| {
            let hod = (h % 24) as f64;
            let day = h / 24;
            let morning = 14.0 * (-((hod - 8.5) / 2.0).powi(2)).exp();
            let evening = 22.0 * (-((hod - 19.0) / 2.2).powi(2)).exp();
            let night = -12.0 * (-((hod - 3.5) / 2.5).powi(2)).exp();
            let weekend = if day % 7 >= 5 { -6.0 } else { 0.0 };
            let noise = 4.0 * (next() - 0.5);
            let v = 38.0 + morning + evening + night + weekend + noise;
            (v * 100.0).round() / 100.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn rows(hours: usize, value: f64, skip: Option<usize>) -> String {
        let mut s = String::from("timestamp,price_eur_mwh\n");
        let start = default_start();
        for h in 0..hours {
            if Some(h) == skip {
                continue;
            }
            let ts = start + Duration::hours(h as i64);
            s.push_str(&format!("{},{}\n", ts.format("%Y-%m-%dT%H:%M:%S"), value));
        }
        s
    }

    #[test]
    fn constant_file_converts_units() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "p.csv", &rows(24, 50.0, None));
        let s = load_prices(&p, PriceFormat::HourlyCsv).unwrap();
        assert_eq!(s.len(), 24);
        for v in s.prices() {
            assert_eq!(*v, 50.0 * 1e-6);
        }
        assert!((s.prices()[0] - 5e-5).abs() < 1e-20);
    }

    #[test]
    fn missing_hour_is_a_gap() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "p.csv", &rows(24, 50.0, Some(13)));
        let err = load_prices(&p, PriceFormat::HourlyCsv).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Schema(_)));
        assert!(msg.contains("2014-01-01 13:00:00"), "{msg}");
    }

    #[test]
    fn duplicate_hour_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = rows(3, 10.0, None);
        body.push_str("2014-01-01T02:00:00,10\n");
        let p = write_file(dir.path(), "p.csv", &body);
        assert!(matches!(
            load_prices(&p, PriceFormat::HourlyCsv),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "timestamp,price_eur_mwh\n2014-01-01T00:00:00,1\n2014-01-01T01:00:00,abc\n";
        let p = write_file(dir.path(), "p.csv", body);
        match load_prices(&p, PriceFormat::HourlyCsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "p.csv", "timestamp,price_eur_mwh\n");
        assert!(matches!(
            load_prices(&p, PriceFormat::HourlyCsv),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn negative_prices_accepted() {
        let s = PriceSeries::from_eur_per_mwh(&[-20.0, 5.0]).unwrap();
        assert!(s.prices()[0] < 0.0);
    }

    #[test]
    fn year_fixture_has_8760_rows() {
        let dir = tempfile::tempdir().unwrap();
        let series = PriceSeries::from_eur_per_mwh(&synthetic_prices_eur_mwh(8760, 7)).unwrap();
        let p = dir.path().join("year.csv");
        write_prices(&series, &p).unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        // count data rows of the generated file independently of the loader
        let data_rows = body.lines().skip(1).filter(|l| !l.is_empty()).count();
        let last = body.lines().last().unwrap();
        assert!(last.starts_with("2014-12-31T23:00:00"));
        let loaded = load_prices(&p, PriceFormat::HourlyCsv).unwrap();
        assert_eq!(loaded.len(), data_rows);
        assert_eq!(loaded.len(), 8760);
    }

    #[test]
    fn zero_order_hold_boundaries() {
        let s = PriceSeries::from_eur_per_mwh(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(s.price_at(0.0).unwrap(), 10.0 * PER_MWH_TO_PER_WH);
        assert_eq!(s.price_at(59.0 * 60.0 + 59.0).unwrap(), 10.0 * PER_MWH_TO_PER_WH);
        assert_eq!(s.price_at(3600.0).unwrap(), 20.0 * PER_MWH_TO_PER_WH);
        assert!(matches!(s.price_at(3.0 * 3600.0), Err(Error::Range(_))));
        assert!(matches!(s.price_at(-1.0), Err(Error::Range(_))));
    }

    #[test]
    fn constant_series_constant_price() {
        let s = PriceSeries::from_eur_per_mwh(&[42.0; 5]).unwrap();
        for k in 0..50 {
            assert_eq!(s.price_at(k as f64 * 359.0).unwrap(), 42.0 * PER_MWH_TO_PER_WH);
        }
    }

    #[test]
    fn offsets_are_normalised() {
        let dir = tempfile::tempdir().unwrap();
        let body = "timestamp,price_eur_mwh\n2014-03-30T01:00:00+01:00,1\n2014-03-30T03:00:00+02:00,2\n";
        let p = write_file(dir.path(), "p.csv", body);
        let s = load_prices(&p, PriceFormat::HourlyCsv).unwrap();
        assert_eq!(s.len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hold_matches_floor_index(values in prop::collection::vec(-200.0f64..400.0, 1..60),
                                        frac in 0.0f64..1.0) {
                let s = PriceSeries::from_eur_per_mwh(&values).unwrap();
                let t = frac * s.horizon_s();
                let idx = (t / HOUR_S).floor() as usize;
                prop_assert_eq!(s.price_at(t).unwrap(), s.prices()[idx]);
            }

            #[test]
            fn write_reload_is_identical(values in prop::collection::vec(-500.0f64..3000.0, 1..48)) {
                let dir = tempfile::tempdir().unwrap();
                let s = PriceSeries::from_eur_per_mwh(&values).unwrap();
                let p = dir.path().join("rt.csv");
                write_prices(&s, &p).unwrap();
                let back = load_prices(&p, PriceFormat::HourlyCsv).unwrap();
                prop_assert_eq!(back, s);
            }
        }
    }
}
