use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

/// Piecewise-linear lookup over strictly increasing abscissae, clamped at the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1d {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Table1d {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() < 2 || x.len() != y.len() {
            return Err(Error::Schema(format!(
                "table needs at least two (x, y) pairs of equal length, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Schema("table abscissae must be strictly increasing".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Schema("table contains non-finite values".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    fn segment(&self, x: f64) -> usize {
        // index i with x[i] <= x < x[i+1], clamped to valid segments
        let n = self.x.len();
        match self.x.partition_point(|&v| v <= x) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain();
        if x <= lo {
            return self.y[0];
        }
        if x >= hi {
            return self.y[self.y.len() - 1];
        }
        let i = self.segment(x);
        let t = (x - self.x[i]) / (self.x[i + 1] - self.x[i]);
        self.y[i] + t * (self.y[i + 1] - self.y[i])
    }

    /// Slope of the segment containing `x` (end segments outside the domain).
    pub fn slope(&self, x: f64) -> f64 {
        let i = self.segment(x);
        (self.y[i + 1] - self.y[i]) / (self.x[i + 1] - self.x[i])
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.y.windows(2).all(|w| w[1] > w[0])
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.y.windows(2).all(|w| w[1] < w[0])
    }

    pub fn is_monotone(&self) -> bool {
        self.y.windows(2).all(|w| w[1] >= w[0]) || self.y.windows(2).all(|w| w[1] <= w[0])
    }

    /// Reads a two-column CSV with the given header names.
    pub fn load_csv(path: impl AsRef<Path>, x_name: &str, y_name: &str) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: e.to_string(),
            })?
            .clone();
        if headers.len() != 2 || &headers[0] != x_name || &headers[1] != y_name {
            return Err(Error::Schema(format!(
                "{}: expected header `{x_name},{y_name}`",
                path.display()
            )));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 2 {
                return Err(bad(format!("expected 2 fields, found {}", rec.len())));
            }
            xs.push(rec[0].parse::<f64>().map_err(|_| bad(format!("bad number `{}`", &rec[0])))?);
            ys.push(rec[1].parse::<f64>().map_err(|_| bad(format!("bad number `{}`", &rec[1])))?);
        }
        Table1d::new(xs, ys).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

/// Fritsch–Carlson monotone cubic through the points of a [`Table1d`], extended
/// linearly with the end slopes outside the domain. C¹ everywhere, so finite
/// differences across knots stay well behaved.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    table: Table1d,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(table: Table1d) -> Self {
        let (x, y) = (&table.x, &table.y);
        let n = x.len();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / (x[i + 1] - x[i])).collect();
        let mut m = vec![0.0; n];
        m[0] = delta[0];
        m[n - 1] = delta[n - 2];
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] <= 0.0 {
                m[i] = 0.0;
            } else {
                // weighted harmonic mean
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                m[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        Self { table, slopes: m }
    }

    pub fn table(&self) -> &Table1d {
        &self.table
    }

    pub fn domain(&self) -> (f64, f64) {
        self.table.domain()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (lo, hi) = self.table.domain();
        let t = &self.table;
        if x <= lo {
            return t.y[0] + self.slopes[0] * (x - lo);
        }
        if x >= hi {
            return t.y[t.y.len() - 1] + self.slopes[t.y.len() - 1] * (x - hi);
        }
        let i = t.segment(x);
        let h = t.x[i + 1] - t.x[i];
        let s = (x - t.x[i]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * t.y[i] + h10 * h * self.slopes[i] + h01 * t.y[i + 1] + h11 * h * self.slopes[i + 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_and_clamps() {
        let t = Table1d::new(vec![0.0, 0.5, 1.0], vec![3.0, 3.7, 4.2]).unwrap();
        assert_eq!(t.eval(0.5), 3.7);
        assert_eq!(t.eval(0.0), 3.0);
        assert_eq!(t.eval(1.0), 4.2);
        assert!((t.eval(0.25) - 3.35).abs() < 1e-15);
        assert_eq!(t.eval(-1.0), 3.0);
        assert_eq!(t.eval(2.0), 4.2);
        assert!((t.slope(0.75) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_cubic_hits_knots_and_keeps_order() {
        let x: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 4.0 - v * v * v - 0.3 * v).collect();
        let c = MonotoneCubic::new(Table1d::new(x.clone(), y.clone()).unwrap());
        for (a, b) in x.iter().zip(&y) {
            assert!((c.eval(*a) - b).abs() < 1e-14);
        }
        let mut prev = f64::INFINITY;
        for k in 0..=1000 {
            let v = c.eval(k as f64 / 1000.0);
            assert!(v < prev);
            prev = v;
        }
        assert!((c.eval(0.37) - (4.0 - 0.37f64.powi(3) - 0.111)).abs() < 1e-4);
        // continuous linear extension past the ends
        let h = 1e-9;
        assert!((c.eval(-h) - y[0]).abs() < 1e-8);
        assert!(c.eval(1.0 + 0.1) < c.eval(1.0));
    }

    #[test]
    fn rejects_unsorted() {
        assert!(Table1d::new(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(Table1d::new(vec![0.0], vec![1.0]).is_err());
    }
}
