//! Numeric containers shared by every stage of the pipeline.
//!
//! A [`Dataset`] holds the response `y` (n), the endogenous regressors `X`
//! (n x p) and the instruments `Z` (n x K). Columns are addressed 0-based in
//! the Rust API; the CSV schema and the CLI use the 1-based names
//! `y, x1..xp, z1..zK`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulation-only truth attached to a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub beta0: Vec<f64>,
    /// Structural errors, `y = X beta0 + xi`.
    pub xi: Vec<f64>,
    /// Population orthogonal-instrument coefficients keyed by 0-based target index.
    pub mu0: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    truth: Option<GroundTruth>,
}

/// Outcome of [`Dataset::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking only that the three blocks share a row count.
    /// Semantic invariants are reported by [`Dataset::validate`].
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::Dimension(format!(
                "row counts differ: y has {}, X has {}, Z has {}",
                n,
                x.nrows(),
                z.nrows()
            )));
        }
        Ok(Self {
            y,
            x,
            z,
            truth: None,
        })
    }

    /// Convenience constructor from row-major nested vectors.
    pub fn from_rows(y: Vec<f64>, x_rows: &[Vec<f64>], z_rows: &[Vec<f64>]) -> Result<Self> {
        let n = y.len();
        let x = rows_to_matrix(x_rows, n, "X")?;
        let z = rows_to_matrix(z_rows, n, "Z")?;
        Self::new(DVector::from_vec(y), x, z)
    }

    pub fn with_truth(mut self, truth: GroundTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    /// Returns a copy with a different response vector (truth is dropped).
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(y, self.x.clone(), self.z.clone())
    }

    /// Reports every violated invariant without mutating the dataset.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.n() < 2 {
            violations.push(format!("n >= 2 (got n = {})", self.n()));
        }
        if self.p() < 1 {
            violations.push("p >= 1 (got p = 0)".to_string());
        }
        if self.k() < self.p() {
            violations.push(format!(
                "K >= p (got K = {}, p = {})",
                self.k(),
                self.p()
            ));
        }
        if !self.y.iter().all(|v| v.is_finite()) {
            violations.push("all entries of y finite".to_string());
        }
        if !self.x.iter().all(|v| v.is_finite()) {
            violations.push("all entries of X finite".to_string());
        }
        if !self.z.iter().all(|v| v.is_finite()) {
            violations.push("all entries of Z finite".to_string());
        }
        ValidationReport {
            ok: violations.is_empty(),
            violations,
        }
    }

    /// Errors unless [`Dataset::validate`] passes. K < p maps to an
    /// identification error, everything else to `InvalidData`.
    pub fn ensure_valid(&self) -> Result<()> {
        if self.p() >= 1 && self.k() < self.p() {
            return Err(Error::Identification {
                instruments: self.k(),
                regressors: self.p(),
            });
        }
        let report = self.validate();
        if report.ok {
            Ok(())
        } else {
            Err(Error::InvalidData(report.violations.join("; ")))
        }
    }

    /// Sample cross-moment matrix `Psi = Z'X / n` (K x p).
    pub fn psi(&self) -> DMatrix<f64> {
        self.z.tr_mul(&self.x) / self.n() as f64
    }

    /// Writes the dataset as CSV with header `y,x1..xp,z1..zK`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.p()).map(|i| format!("x{i}")));
        header.extend((1..=self.k()).map(|i| format!("z{i}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut record = Vec::with_capacity(1 + self.p() + self.k());
            record.push(self.y[i].to_string());
            record.extend(self.x.row(i).iter().map(|v| v.to_string()));
            record.extend(self.z.row(i).iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], n: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n {
        return Err(Error::Dimension(format!(
            "{name} has {} rows, expected {n}",
            rows.len()
        )));
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension(format!("{name} rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
}

/// Loads a dataset from a CSV file; see [`read_dataset`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file)
}

/// Reads a CSV with a mandatory header naming `y`, `x1..xp` and `z1..zK`.
///
/// Columns are located by name, so their order in the file is irrelevant.
/// Unrecognised columns are ignored. The result is validated before it is
/// returned.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h == name);

    let y_col = position("y").ok_or_else(|| Error::MissingColumn("y".into()))?;
    let x_cols = indexed_columns(&headers, 'x')?;
    let z_cols = indexed_columns(&headers, 'z')?;
    if x_cols.is_empty() {
        return Err(Error::MissingColumn("x1".into()));
    }
    if z_cols.is_empty() {
        return Err(Error::MissingColumn("z1".into()));
    }

    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut z = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        // 1-based data row, header excluded
        let row = row_idx + 1;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            let value: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: headers[col].to_string(),
                message: format!("non-numeric value `{raw}`"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[col].to_string(),
                    message: format!("non-finite value `{raw}`"),
                });
            }
            Ok(value)
        };
        y.push(cell(y_col)?);
        x.push(x_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?);
        z.push(z_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?);
    }
    let dataset = Dataset::from_rows(y, &x, &z)?;
    dataset.ensure_valid()?;
    Ok(dataset)
}

/// Finds `prefix1..prefixN` in the header, requiring a contiguous range.
fn indexed_columns(headers: &csv::StringRecord, prefix: char) -> Result<Vec<usize>> {
    let mut found: BTreeMap<usize, usize> = BTreeMap::new();
    for (pos, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix(prefix) {
            if let Ok(idx) = rest.parse::<usize>() {
                if idx >= 1 && !rest.starts_with('0') {
                    found.insert(idx, pos);
                }
            }
        }
    }
    let max = found.keys().next_back().copied().unwrap_or(0);
    (1..=max)
        .map(|i| {
            found
                .get(&i)
                .copied()
                .ok_or_else(|| Error::MissingColumn(format!("{prefix}{i}")))
        })
        .collect()
}

/// Tuning parameters of the two estimation programs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda_t: f64,
    pub tau: f64,
    /// Moment-constraint multiplier of the instrument program (1 for the
    /// coefficient program).
    pub c: f64,
    pub alpha: f64,
}

impl PenaltyConfig {
    pub fn new(lambda_t: f64, tau: f64, c: f64, alpha: f64) -> Result<Self> {
        let cfg = Self {
            lambda_t,
            tau,
            c,
            alpha,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lambda_t > 0.0 && self.lambda_t.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda_t must be positive, got {}",
                self.lambda_t
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.c >= 1.0 && self.c.is_finite()) {
            return Err(Error::Parameter(format!("c must be >= 1, got {}", self.c)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        read_dataset(text.as_bytes())
    }

    #[test]
    fn header_defines_dimensions() {
        let mut text = String::from("y,x1,z1,z2\n");
        for i in 0..10 {
            text.push_str(&format!("{},{},{},{}\n", i, i as f64 * 0.5, 1.0, -(i as f64)));
        }
        let d = parse(&text).unwrap();
        assert_eq!((d.n(), d.p(), d.k()), (10, 1, 2));
    }

    #[test]
    fn columns_are_found_by_name() {
        let d = parse("z2,x1,y,z1\n1,2,3,4\n5,6,7,8\n").unwrap();
        assert_eq!(d.y().as_slice(), &[3.0, 7.0]);
        assert_eq!(d.z()[(0, 0)], 4.0);
        assert_eq!(d.z()[(0, 1)], 1.0);
    }

    #[test]
    fn under_identified_is_rejected() {
        let err = parse("y,x1,x2,z1\n1,2,3,4\n5,6,7,8\n").unwrap_err();
        assert!(matches!(
            err,
            Error::Identification {
                instruments: 1,
                regressors: 2
            }
        ));
    }

    #[test]
    fn nan_cell_is_rejected() {
        let err = parse("y,x1,z1\n1,NaN,2\n3,4,5\n").unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "x1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let err = parse("y,x1,z1\n1,2,3\n3,abc,5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, ref column, .. } if column == "x1"));
    }

    #[test]
    fn missing_columns_are_named() {
        assert!(matches!(parse("x1,z1\n1,2\n").unwrap_err(), Error::MissingColumn(c) if c == "y"));
        assert!(
            matches!(parse("y,x1,x3,z1,z2,z3\n1,2,3,4,5,6\n").unwrap_err(), Error::MissingColumn(c) if c == "x2")
        );
    }

    #[test]
    fn validate_reports_small_n() {
        let d = Dataset::from_rows(vec![1.0], &[vec![1.0]], &[vec![1.0]]).unwrap();
        let report = d.validate();
        assert!(!report.ok);
        assert!(report.violations[0].starts_with("n >= 2"));
    }

    #[test]
    fn exact_identification_passes() {
        let d = Dataset::from_rows(
            vec![1.0, 2.0, 3.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            &[vec![1.0, 2.0], vec![3.0, 1.0], vec![0.5, 1.0]],
        )
        .unwrap();
        let report = d.validate();
        assert!(report.ok, "{:?}", report.violations);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(json, r#"{"ok":true,"violations":[]}"#);
    }

    #[test]
    fn penalty_config_bounds() {
        assert!(PenaltyConfig::new(1.0, 0.1, 1.0, 0.05).is_ok());
        assert!(PenaltyConfig::new(0.0, 0.1, 1.0, 0.05).is_err());
        assert!(PenaltyConfig::new(1.0, 0.0, 1.0, 0.05).is_err());
        assert!(PenaltyConfig::new(1.0, 0.1, 0.5, 0.05).is_err());
        assert!(PenaltyConfig::new(1.0, 0.1, 1.0, 1.0).is_err());
    }
}
