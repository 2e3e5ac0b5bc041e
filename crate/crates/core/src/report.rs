//! Report files: every report embeds the run manifest that produced it,
//! per-seed scalars and rows, and their cross-seed means. Curves are written
//! as CSV point tables for external plotting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::fnv1a64;
use crate::evalkit::ExcludedQuery;
use crate::metrics::{Curve, MeanCurve, Summary};

pub const REPORT_SCHEMA: &str = "capalign.report.v1";
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: unsupported report schema `{found}`")]
    Schema { path: PathBuf, found: String },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, ReportError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    /// FNV-1a 64 of the file bytes, hex.
    pub content_hash: String,
}

/// Hash every input file; directories contribute their files in name order.
pub fn hash_inputs(paths: &[PathBuf]) -> Result<Vec<InputFile>> {
    let mut out = Vec::new();
    for p in paths {
        let mut files = if p.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file())
                .collect();
            v.sort();
            v
        } else {
            vec![p.clone()]
        };
        for f in files.drain(..) {
            let bytes = fs::read(&f).map_err(io_err(&f))?;
            out.push(InputFile {
                path: f.display().to_string(),
                content_hash: format!("{:016x}", fnv1a64(&bytes)),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; enough to re-run the command.
    pub args: Vec<String>,
    pub config_fingerprint: String,
    pub inputs: Vec<InputFile>,
    pub seeds: Vec<u64>,
    pub toolkit_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], fingerprint: u64, inputs: Vec<InputFile>, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_owned(),
            args: args.to_vec(),
            config_fingerprint: format!("{fingerprint:016x}"),
            inputs,
            seeds,
            toolkit_version: TOOLKIT_VERSION.to_owned(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Train,
    Knn,
    ZeroShotCls,
    Retrieval,
}

/// One labelled line of a results table (a class, prompt set or query).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub checkpoint: String,
    pub scalars: BTreeMap<String, f64>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub task: Task,
    pub run: RunManifest,
    pub per_seed: Vec<SeedResult>,
    /// Arithmetic mean of every per-seed scalar.
    pub cross_seed_mean: BTreeMap<String, f64>,
    /// Per-seed rows averaged by label.
    pub rows: Vec<ReportRow>,
    /// Spread across prompt sets of the cross-seed mean row values.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompt_set_aggregates: BTreeMap<String, Summary>,
    #[serde(default)]
    pub excluded_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_queries: Vec<ExcludedQuery>,
}

/// Mean of each key over the maps that contain it, in key order.
fn mean_maps<'a>(maps: impl IntoIterator<Item = &'a BTreeMap<String, f64>>) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for m in maps {
        for (k, v) in m {
            let e = sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

impl MetricsReport {
    pub fn new(task: Task, run: RunManifest, per_seed: Vec<SeedResult>) -> Self {
        let cross_seed_mean = mean_maps(per_seed.iter().map(|s| &s.scalars));
        // Row order follows the first seed; labels are shared across seeds.
        let mut order: Vec<&str> = Vec::new();
        let mut by_label: BTreeMap<&str, Vec<&BTreeMap<String, f64>>> = BTreeMap::new();
        for s in &per_seed {
            for r in &s.rows {
                let slot = by_label.entry(r.label.as_str()).or_default();
                if slot.is_empty() {
                    order.push(&r.label);
                }
                slot.push(&r.values);
            }
        }
        let rows = order
            .iter()
            .map(|label| ReportRow {
                label: label.to_string(),
                values: mean_maps(by_label[label].iter().copied()),
            })
            .collect();
        Self {
            schema: REPORT_SCHEMA.to_owned(),
            task,
            run,
            per_seed,
            cross_seed_mean,
            rows,
            prompt_set_aggregates: BTreeMap::new(),
            excluded_count: 0,
            excluded_queries: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let report: Self = serde_json::from_str(&text).map_err(|e| ReportError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if report.schema != REPORT_SCHEMA {
            return Err(ReportError::Schema {
                path: path.to_path_buf(),
                found: report.schema,
            });
        }
        Ok(report)
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_owned()
    } else {
        v.to_string()
    }
}

/// `threshold,x,y` rows; ROC x/y are FPR/TPR, PR x/y are recall/precision.
pub fn write_curve_csv(path: &Path, curve: &Curve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["threshold", "x", "y"]).map_err(csv_err(path))?;
    for (t, (x, y)) in curve.thresholds.iter().zip(&curve.points) {
        w.write_record([fmt_f64(*t), fmt_f64(*x), fmt_f64(*y)])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `x,mean,lower,upper` rows on the averaging grid.
pub fn write_mean_curve_csv(path: &Path, curve: &MeanCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["x", "mean", "lower", "upper"]).map_err(csv_err(path))?;
    for i in 0..curve.x.len() {
        w.write_record([curve.x[i], curve.mean[i], curve.lower[i], curve.upper[i]].map(fmt_f64))
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
