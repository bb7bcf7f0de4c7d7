//! Certified-accuracy curves, cross-σ envelopes and comparison tables, all
//! computed from per-input certification CSVs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::CertificationResult;
use crate::error::{Error, Result};

/// Largest radius on the reporting grid.
pub const GRID_MAX: f64 = 2.0;
/// Grid step in ε.
pub const GRID_STEP: f64 = 0.01;
/// Radii shown in comparison tables.
pub const TABLE_RADII: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// ε values `0, 0.01, …, 2.0`, each computed as `i / 100` so they print exactly.
pub fn eps_grid() -> Vec<f64> {
    let steps = (GRID_MAX / GRID_STEP).round() as usize;
    (0..=steps).map(|i| i as f64 / 100.0).collect()
}

/// One row of a certification CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertRecord {
    pub id: u64,
    pub label: usize,
    pub c_a: usize,
    pub k: u64,
    pub n: u64,
    pub p_lower: f64,
    /// 0 when abstaining.
    pub radius: f64,
    pub abstain: u8,
    pub sigma: f64,
    pub seed: u64,
}

impl CertRecord {
    pub fn new(result: &CertificationResult, label: usize) -> Self {
        Self {
            id: result.id,
            label,
            c_a: result.predicted,
            k: result.k(),
            n: result.params.n,
            p_lower: result.p_lower,
            radius: result.radius.unwrap_or(0.0),
            abstain: u8::from(result.abstained()),
            sigma: result.params.sigma,
            seed: result.params.seed,
        }
    }

    pub fn certified_correct(&self, eps: f64) -> bool {
        self.abstain == 0 && self.c_a == self.label && self.radius >= eps
    }
}

/// One row of a clean-prediction CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: u64,
    pub label: usize,
    pub predicted: usize,
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_csv<R: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<R>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Certified accuracy of one σ on the ε grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub sigma: f64,
    pub accuracy: Vec<f64>,
}

impl Curve {
    pub fn from_records(records: &[CertRecord], grid: &[f64]) -> Result<Self> {
        let sigma = match records.first() {
            Some(r) => r.sigma,
            None => return Err(Error::Format("no certification records".into())),
        };
        if records.iter().any(|r| r.sigma != sigma) {
            return Err(Error::Format("records mix several sigma values".into()));
        }
        let total = records.len() as f64;
        let accuracy = grid
            .iter()
            .map(|&eps| records.iter().filter(|r| r.certified_correct(eps)).count() as f64 / total)
            .collect();
        Ok(Self { sigma, accuracy })
    }

    /// The bracketed value: certified accuracy at ε = 0.
    pub fn at_zero(&self) -> f64 {
        self.accuracy[0]
    }
}

/// Per-σ curves on a shared grid plus their pointwise maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveTable {
    pub grid: Vec<f64>,
    pub curves: Vec<Curve>,
    pub envelope: Vec<f64>,
    /// σ of the curve attaining the envelope (first in σ order on ties).
    pub envelope_sigma: Vec<f64>,
    pub clean_accuracy: Option<f64>,
}

impl CurveTable {
    pub fn new(grid: Vec<f64>, mut curves: Vec<Curve>, clean_accuracy: Option<f64>) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::Format("curve table needs at least one sigma".into()));
        }
        if curves.iter().any(|c| c.accuracy.len() != grid.len()) {
            return Err(Error::Format("curve length differs from the grid".into()));
        }
        curves.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
        let mut envelope = Vec::with_capacity(grid.len());
        let mut envelope_sigma = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let mut best = &curves[0];
            for c in &curves[1..] {
                if c.accuracy[i] > best.accuracy[i] {
                    best = c;
                }
            }
            envelope.push(best.accuracy[i]);
            envelope_sigma.push(best.sigma);
        }
        Ok(Self {
            grid,
            curves,
            envelope,
            envelope_sigma,
            clean_accuracy,
        })
    }

    /// Build from one certification record set per σ.
    pub fn from_records(per_sigma: &[Vec<CertRecord>], clean_accuracy: Option<f64>) -> Result<Self> {
        let grid = eps_grid();
        let curves = per_sigma
            .iter()
            .map(|r| Curve::from_records(r, &grid))
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, curves, clean_accuracy)
    }

    fn index_of(&self, eps: f64) -> Result<usize> {
        self.grid
            .iter()
            .position(|&g| (g - eps).abs() < 1e-9)
            .ok_or_else(|| Error::Format(format!("radius {eps} is not on the grid")))
    }

    /// Envelope value at `eps`, the σ attaining it, and that curve's ε=0 value.
    pub fn envelope_at(&self, eps: f64) -> Result<(f64, f64, f64)> {
        let i = self.index_of(eps)?;
        let sigma = self.envelope_sigma[i];
        let curve = self.curves.iter().find(|c| c.sigma == sigma).expect("envelope sigma has a curve");
        Ok((self.envelope[i], sigma, curve.at_zero()))
    }

    pub fn curve(&self, sigma: f64) -> Option<&Curve> {
        self.curves.iter().find(|c| c.sigma == sigma)
    }

    /// Plot-ready CSV: one row per ε, one column per σ, then the envelope.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps");
        for c in &self.curves {
            let _ = write!(out, ",sigma_{}", c.sigma);
        }
        out.push_str(",envelope,envelope_sigma\n");
        for (i, eps) in self.grid.iter().enumerate() {
            let _ = write!(out, "{eps}");
            for c in &self.curves {
                let _ = write!(out, ",{}", c.accuracy[i]);
            }
            let _ = writeln!(out, ",{},{}", self.envelope[i], self.envelope_sigma[i]);
        }
        out
    }

    /// Inverse of [`CurveTable::to_csv`]; the envelope is recomputed and
    /// must match the stored columns.
    pub fn from_csv(text: &str, clean_accuracy: Option<f64>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(csv_error)?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        let k = cols.len();
        if k < 4 || cols[0] != "eps" || cols[k - 2] != "envelope" || cols[k - 1] != "envelope_sigma" {
            return Err(Error::Format(format!("unexpected curve header {cols:?}")));
        }
        let sigmas = cols[1..k - 2]
            .iter()
            .map(|c| {
                c.strip_prefix("sigma_")
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Format(format!("bad curve column {c}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut grid = Vec::new();
        let mut acc = vec![Vec::new(); sigmas.len()];
        let mut stored = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(csv_error)?;
            let num = |j: usize| -> Result<f64> {
                row[j].parse().map_err(|_| Error::Format(format!("bad number {:?}", &row[j])))
            };
            grid.push(num(0)?);
            for (s, a) in acc.iter_mut().enumerate() {
                a.push(num(s + 1)?);
            }
            stored.push((num(k - 2)?, num(k - 1)?));
        }
        let curves = sigmas.into_iter().zip(acc).map(|(sigma, accuracy)| Curve { sigma, accuracy }).collect();
        let table = Self::new(grid, curves, clean_accuracy)?;
        for (i, &(e, s)) in stored.iter().enumerate() {
            if e != table.envelope[i] || s != table.envelope_sigma[i] {
                return Err(Error::Format(format!("stored envelope disagrees at eps {}", table.grid[i])));
            }
        }
        Ok(table)
    }
}

/// A named run for comparison tables.
pub struct RunSummary {
    pub name: String,
    pub table: CurveTable,
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Aligned text table and machine-readable CSV comparing runs at
/// [`TABLE_RADII`]. Each cell shows the envelope value with the ε=0
/// accuracy of the attaining curve in brackets.
pub fn comparison(runs: &[RunSummary]) -> Result<(String, String)> {
    let first = runs.first().ok_or_else(|| Error::Format("no runs to compare".into()))?;
    for r in runs {
        if r.table.grid != first.table.grid {
            return Err(Error::Format(format!(
                "run {} uses a different eps grid than {}",
                r.name, first.name
            )));
        }
    }
    let mut header = vec!["run".to_string(), "clean".to_string()];
    header.extend(TABLE_RADII.iter().map(|e| format!("eps={e}")));
    let mut rows = vec![header];
    let mut csv_out = String::from("run,clean_acc");
    for e in TABLE_RADII {
        let _ = write!(csv_out, ",eps_{e},eps_{e}_sigma,eps_{e}_at_zero");
    }
    csv_out.push('\n');
    for r in runs {
        let clean = r.table.clean_accuracy;
        let mut row = vec![r.name.clone(), clean.map_or("-".into(), pct)];
        let _ = write!(csv_out, "{},{}", r.name, clean.map_or(String::new(), |c| c.to_string()));
        for e in TABLE_RADII {
            let (v, sigma, zero) = r.table.envelope_at(e)?;
            row.push(format!("({}) {}", pct(zero), pct(v)));
            let _ = write!(csv_out, ",{v},{sigma},{zero}");
        }
        csv_out.push('\n');
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect();
        let _ = writeln!(text, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(text, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    Ok((text, csv_out))
}

/// Fraction of predictions that match their labels.
pub fn clean_accuracy(predictions: &[PredictionRecord]) -> Option<f64> {
    if predictions.is_empty() {
        return None;
    }
    Some(predictions.iter().filter(|p| p.predicted == p.label).count() as f64 / predictions.len() as f64)
}
