use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaqError};
use crate::metrics::MetricTrace;

/// Floats stored as shortest round-trip strings so NaN and infinities
/// survive JSON.
mod float_str {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(D::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Relation {
    pub fn holds(self, observed: f64, threshold: f64) -> bool {
        match self {
            Relation::Lt => observed < threshold,
            Relation::Le => observed <= threshold,
            Relation::Gt => observed > threshold,
            Relation::Ge => observed >= threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Relation::Lt => "<",
            Relation::Le => "<=",
            Relation::Gt => ">",
            Relation::Ge => ">=",
        }
    }
}

/// One thresholded check. `claim` is the qualitative statement the
/// desk-scale threshold stands in for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    #[serde(with = "float_str")]
    pub observed: f64,
    pub relation: Relation,
    #[serde(with = "float_str")]
    pub threshold: f64,
    pub passed: bool,
    pub claim: String,
}

impl Verdict {
    pub fn new(name: &str, observed: f64, relation: Relation, threshold: f64, claim: &str) -> Self {
        Self {
            name: name.into(),
            observed,
            relation,
            threshold,
            passed: relation.holds(observed, threshold),
            claim: claim.into(),
        }
    }
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    #[serde(with = "float_str")]
    pub mean: f64,
    #[serde(with = "float_str")]
    pub std: f64,
    pub n: usize,
}

impl SummaryRow {
    pub fn of(metric: impl Into<String>, values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            metric: metric.into(),
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

/// One experimental cell (e.g. an algorithm/seed pair) and its trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub labels: BTreeMap<String, String>,
    pub trace: MetricTrace,
}

impl Cell {
    pub fn new(name: impl Into<String>, labels: &[(&str, String)], trace: MetricTrace) -> Self {
        Self {
            name: name.into(),
            labels: labels.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            trace,
        }
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }

    pub fn label_f64(&self, key: &str) -> Result<f64> {
        self.label(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SaqError::InvalidConfig(format!("cell {} lacks numeric label {key}", self.name)))
    }
}

#[derive(Serialize, Deserialize)]
struct CellEntry {
    name: String,
    labels: BTreeMap<String, String>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    experiment: String,
    config: BTreeMap<String, String>,
    cells: Vec<CellEntry>,
    summary: Vec<SummaryRow>,
    verdicts: Vec<Verdict>,
    passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: BTreeMap<String, String>,
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
    pub verdicts: Vec<Verdict>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn cells_where(&self, key: &str, value: &str) -> impl Iterator<Item = &Cell> {
        let (key, value) = (key.to_string(), value.to_string());
        self.cells.iter().filter(move |c| c.label(&key) == Some(value.as_str()))
    }

    /// Plain-text table of summary rows and verdicts.
    pub fn summary_text(&self) -> String {
        let mut out = format!("experiment: {}\n\n", self.experiment);
        if !self.summary.is_empty() {
            let w = self.summary.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
            writeln!(out, "{:<w$}  {:>12}  {:>12}  {:>4}", "metric", "mean", "std", "n").unwrap();
            for r in &self.summary {
                writeln!(out, "{:<w$}  {:>12.6}  {:>12.6}  {:>4}", r.metric, r.mean, r.std, r.n).unwrap();
            }
            out.push('\n');
        }
        for v in &self.verdicts {
            writeln!(
                out,
                "[{}] {}: {} {} {}\n       claim: {}",
                if v.passed { "PASS" } else { "FAIL" },
                v.name,
                v.observed,
                v.relation.symbol(),
                v.threshold,
                v.claim
            )
            .unwrap();
        }
        writeln!(out, "\noverall: {}", if self.passed() { "PASS" } else { "FAIL" }).unwrap();
        out
    }

    /// Writes `report.json`, one CSV per cell under `cells/`, and `summary.txt`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let cells_dir = dir.join("cells");
        std::fs::create_dir_all(&cells_dir)?;
        let mut entries = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let file = format!("cells/{}.csv", cell.name);
            cell.trace.write_csv(&dir.join(&file))?;
            entries.push(CellEntry {
                name: cell.name.clone(),
                labels: cell.labels.clone(),
                file,
            });
        }
        let file = ReportFile {
            experiment: self.experiment.clone(),
            config: self.config.clone(),
            cells: entries,
            summary: self.summary.clone(),
            verdicts: self.verdicts.clone(),
            passed: self.passed(),
        };
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&file)?)?;
        std::fs::write(dir.join("summary.txt"), self.summary_text())?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let file: ReportFile = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?;
        let mut cells = Vec::with_capacity(file.cells.len());
        for e in file.cells {
            cells.push(Cell {
                trace: MetricTrace::read_csv(&dir.join(&e.file))?,
                name: e.name,
                labels: e.labels,
            });
        }
        Ok(Self {
            experiment: file.experiment,
            config: file.config,
            cells,
            summary: file.summary,
            verdicts: file.verdicts,
        })
    }
}

/// Last non-NaN value of `column`, if any.
pub fn final_value(trace: &MetricTrace, column: &str) -> Option<f64> {
    trace.series(column).last().map(|p| p.1)
}

/// Trailing moving average over `window` consecutive values.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.clamp(1, values.len().max(1));
    if values.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() + 1 - w);
    let mut sum: f64 = values[..w].iter().sum();
    out.push(sum / w as f64);
    for i in w..values.len() {
        sum += values[i] - values[i - w];
        out.push(sum / w as f64);
    }
    out
}

/// Fraction of consecutive pairs in the smoothed series that do not increase.
pub fn monotone_fraction(values: &[f64], window: usize) -> f64 {
    let s = smooth(values, window);
    if s.len() < 2 {
        return 1.0;
    }
    s.windows(2).filter(|p| p[1] <= p[0]).count() as f64 / (s.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_and_monotone_fraction() {
        assert_eq!(smooth(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert_eq!(monotone_fraction(&[4.0, 3.0, 2.0, 1.0], 1), 1.0);
        assert_eq!(monotone_fraction(&[1.0, 2.0, 1.0], 1), 0.5);
    }

    #[test]
    fn report_round_trips_through_a_directory() {
        let mut t = MetricTrace::new(&["step", "x"]);
        t.push(vec![1.0, 0.5]);
        let report = ExperimentReport {
            experiment: "demo".into(),
            config: [("seeds".to_string(), "1,2".to_string())].into_iter().collect(),
            cells: vec![Cell::new("a_seed1", &[("seed", "1".into())], t)],
            summary: vec![SummaryRow::of("x", &[0.5])],
            verdicts: vec![Verdict::new("x small", 0.5, Relation::Le, 1.0, "claim")],
        };
        let dir = tempfile::tempdir().unwrap();
        report.write_dir(dir.path()).unwrap();
        assert_eq!(ExperimentReport::read_dir(dir.path()).unwrap(), report);
        assert!(report.summary_text().contains("[PASS] x small"));
    }
}
