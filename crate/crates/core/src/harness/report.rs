use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentKind, ExperimentPlan};
use crate::models::ModelSpec;
use crate::numfmt::{fmt17, to_json_bytes};
use crate::solvers::Lookahead;
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 8] = [
    "experiment",
    "sampler",
    "lookahead",
    "M",
    "NFE",
    "seed",
    "final_error",
    "slope_group",
];

/// One (sampler, M, seed) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub experiment: String,
    pub sampler: String,
    pub lookahead: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "NFE")]
    pub nfe: usize,
    pub seed: u64,
    pub final_error: f64,
    pub slope_group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFit {
    pub group: String,
    pub sampler: String,
    pub lookahead: String,
    /// Seed-averaged (M, error) pairs.
    pub points: Vec<(usize, f64)>,
    pub slope: Option<f64>,
    pub residual: Option<f64>,
    pub points_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CancellationPoint {
    #[serde(rename = "M")]
    pub m: usize,
    pub combined: f64,
    pub backward: f64,
    pub forward: f64,
    /// combined / max(backward, forward)
    pub ratio: f64,
    /// ⟨e_bck, e_for⟩ per seed.
    pub inner_products: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingPoint {
    pub lookahead: Lookahead,
    #[serde(rename = "M")]
    pub m: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundSeries {
    pub sampler: String,
    pub exponent: u32,
    /// (M, M^exponent · mean error)
    pub values: Vec<(usize, f64)>,
    pub min_over_max: f64,
    pub last_over_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeEntry {
    pub sampler: String,
    pub lookahead: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "NFE")]
    pub nfe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub gaussian_bypass: bool,
    pub requested_tolerance: f64,
    pub max_achieved_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub experiment: String,
    pub kind: ExperimentKind,
    pub config: ExperimentPlan,
    pub effective_model: ModelSpec,
    pub rows: Vec<CsvRow>,
    #[serde(default)]
    pub derived_rows: Vec<CsvRow>,
    pub fits: Vec<GroupFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cancellation: Option<Vec<CancellationPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking: Option<Vec<TrackingPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<Vec<LowerBoundSeries>>,
    pub nfe: Vec<NfeEntry>,
    pub oracle: OracleSummary,
}

impl ConvergenceReport {
    pub fn fit(&self, group: &str) -> Option<&GroupFit> {
        self.fits.iter().find(|f| f.group == group)
    }

    pub fn slope(&self, group: &str) -> Option<f64> {
        self.fit(group).and_then(|f| f.slope)
    }
}

pub fn render_csv(rows: &[CsvRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let err = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.sampler.clone(),
            r.lookahead.clone(),
            r.m.to_string(),
            r.nfe.to_string(),
            r.seed.to_string(),
            fmt17(r.final_error),
            r.slope_group.clone(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

pub fn render_json(report: &ConvergenceReport) -> Result<Vec<u8>> {
    Ok(to_json_bytes(report)?)
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`; returns both paths.
pub fn emit_report(report: &ConvergenceReport, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&csv_path, render_csv(&report.rows)?)?;
    fs::write(&json_path, render_json(report)?)?;
    Ok((csv_path, json_path))
}
