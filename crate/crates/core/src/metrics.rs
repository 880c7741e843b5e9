use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SaqError};

/// Time-indexed table of scalar series, one row per logging step.
///
/// Missing cells hold `NaN`. CSV output uses Rust's shortest round-trip
/// float formatting, which is locale-independent and reloads bit-exactly.
#[derive(Clone, Debug, Default)]
pub struct MetricTrace {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl PartialEq for MetricTrace {
    fn eq(&self, other: &Self) -> bool {
        self.columns == other.columns
            && self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

impl MetricTrace {
    pub fn new<S: AsRef<str>>(columns: &[S]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    /// Adds a row from `(column, value)` pairs; unnamed columns become NaN.
    pub fn push_named(&mut self, values: &[(&str, f64)]) {
        let mut row = vec![f64::NAN; self.columns.len()];
        for (name, v) in values {
            let idx = self
                .column_index(name)
                .unwrap_or_else(|| panic!("unknown metric column {name}"));
            row[idx] = *v;
        }
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// Rows where `name` is not NaN, as `(step, value)` pairs keyed by the
    /// first column.
    pub fn series(&self, name: &str) -> Vec<(f64, f64)> {
        let Some(idx) = self.column_index(name) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| !r[idx].is_nan())
            .map(|r| (r[0], r[idx]))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| SaqError::format(0, "missing CSV header"))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut offset = header.len() + 1;
        for line in lines {
            if line.is_empty() {
                offset += 1;
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SaqError::format(offset, format!("bad number: {e}")))?;
            if row.len() != columns.len() {
                return Err(SaqError::format(offset, "row width differs from header"));
            }
            rows.push(row);
            offset += line.len() + 1;
        }
        Ok(Self { columns, rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut t = MetricTrace::new(&["step", "loss", "gap"]);
        t.push(vec![0.0, 0.1 + 0.2, f64::NAN]);
        t.push(vec![1.0, 1e-300, -3.5e17]);
        let back = MetricTrace::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert!(t.to_csv().starts_with("step,loss,gap\n0,0.30000000000000004,NaN\n"));
    }

    #[test]
    fn series_skips_missing() {
        let mut t = MetricTrace::new(&["step", "a", "b"]);
        t.push_named(&[("step", 0.0), ("a", 1.0)]);
        t.push_named(&[("step", 1.0), ("b", 2.0)]);
        assert_eq!(t.series("b"), vec![(1.0, 2.0)]);
    }
}
