//! Dataset manifests: a JSON sidecar describing frames plus a binary feature
//! file holding one little-endian `f32` row per frame.
//!
//! Feature file layout:
//!
//! ```text
//! offset 0   b"CAPFEAT1"
//! offset 8   u32 LE row count
//! offset 12  u32 LE dimension
//! offset 16  rows × dimension f32 LE, row-major
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::fnv1a64;
use crate::rng::SplitMix64;

pub const FEATURE_MAGIC: &[u8; 8] = b"CAPFEAT1";
const FEATURE_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}:{column}: {message}")]
    ParseError {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: byte {offset}: {message}")]
    BadFeatureFile {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("feature dimension {found} does not match manifest dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate frame id `{0}`")]
    DuplicateFrameId(String),
    #[error("frame `{frame_id}` has class `{class}` which is not in the class list")]
    UnknownClass { frame_id: String, class: String },
    #[error("frame `{frame_id}` references row {row} but the feature file has {rows} rows")]
    RowOutOfRange {
        frame_id: String,
        row: usize,
        rows: usize,
    },
    #[error("class `{class}` has {count} record(s); at least 2 are needed to split")]
    ClassTooSmall { class: String, count: usize },
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("feature value of frame `{0}` is not finite")]
    NonFiniteFeature(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryGroup {
    Normal,
    Abnormal,
}

impl BinaryGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryGroup::Normal => "Normal",
            BinaryGroup::Abnormal => "Abnormal",
        }
    }

    pub fn all() -> [BinaryGroup; 2] {
        [BinaryGroup::Normal, BinaryGroup::Abnormal]
    }
}

impl fmt::Display for BinaryGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BinaryGroup {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "Normal" => Ok(BinaryGroup::Normal),
            "Abnormal" => Ok(BinaryGroup::Abnormal),
            other => Err(format!("unknown binary group `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: String,
    pub dataset_id: String,
    pub class_label: String,
    pub binary_group: BinaryGroup,
    pub feature: Vec<f32>,
    pub split: Split,
}

impl FrameRecord {
    pub fn feature_f64(&self) -> Vec<f64> {
        self.feature.iter().map(|&v| v as f64).collect()
    }
}

/// A validated dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub classes: Vec<String>,
    pub feature_dim: usize,
    pub records: Vec<FrameRecord>,
}

impl DatasetManifest {
    /// Build and validate. Record `dataset_id`s are overwritten with the manifest's.
    pub fn new(
        dataset_id: impl Into<String>,
        classes: Vec<String>,
        feature_dim: usize,
        mut records: Vec<FrameRecord>,
    ) -> Result<Self> {
        let dataset_id = dataset_id.into();
        for r in &mut records {
            r.dataset_id.clone_from(&dataset_id);
        }
        let m = Self {
            dataset_id,
            classes,
            feature_dim,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let known: HashSet<&str> = self.classes.iter().map(String::as_str).collect();
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.frame_id.as_str()) {
                return Err(DataError::DuplicateFrameId(r.frame_id.clone()));
            }
            if !known.contains(r.class_label.as_str()) {
                return Err(DataError::UnknownClass {
                    frame_id: r.frame_id.clone(),
                    class: r.class_label.clone(),
                });
            }
            if r.feature.len() != self.feature_dim {
                return Err(DataError::DimensionMismatch {
                    expected: self.feature_dim,
                    found: r.feature.len(),
                });
            }
            if r.feature.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteFeature(r.frame_id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record count per class, including classes with zero records.
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            self.classes.iter().map(|c| (c.clone(), 0)).collect();
        for r in &self.records {
            *counts.entry(r.class_label.clone()).or_default() += 1;
        }
        counts
    }

    pub fn with_records(&self, records: Vec<FrameRecord>) -> Self {
        Self {
            dataset_id: self.dataset_id.clone(),
            classes: self.classes.clone(),
            feature_dim: self.feature_dim,
            records,
        }
    }

    pub fn filter_split(&self, split: Split) -> Self {
        self.with_records(
            self.records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        )
    }

    /// Records grouped by class, each group sorted by frame id.
    fn ids_by_class(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for r in &self.records {
            groups
                .entry(r.class_label.as_str())
                .or_default()
                .push(r.frame_id.as_str());
        }
        for ids in groups.values_mut() {
            ids.sort_unstable();
        }
        groups
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarRecord {
    frame_id: String,
    class_label: String,
    binary_group: BinaryGroup,
    split: Split,
    row_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dataset_id: String,
    feature_file: String,
    feature_dim: usize,
    classes: Vec<String>,
    records: Vec<SidecarRecord>,
}

pub(crate) fn json_parse_error(path: &Path, e: &serde_json::Error) -> DataError {
    DataError::ParseError {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Read a `CAPFEAT1` file into `(rows, dim, values)`.
pub fn read_features(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |offset: usize, message: &str| DataError::BadFeatureFile {
        path: path.to_path_buf(),
        offset,
        message: message.to_owned(),
    };
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(bad(bytes.len(), "truncated header"));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(bad(0, "bad magic, expected CAPFEAT1"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = FEATURE_HEADER_LEN + rows * dim * 4;
    if bytes.len() != expected {
        return Err(bad(
            bytes.len().min(expected),
            &format!("expected {expected} bytes for {rows}x{dim}, found {}", bytes.len()),
        ));
    }
    let values = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, values))
}

pub fn write_features(path: &Path, dim: usize, rows: &[&[f32]]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut write = |buf: &[u8]| w.write_all(buf).map_err(io_err(path));
    write(FEATURE_MAGIC)?;
    write(&(rows.len() as u32).to_le_bytes())?;
    write(&(dim as u32).to_le_bytes())?;
    for row in rows {
        for v in *row {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| json_parse_error(path, &e))?;
    let feature_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&sidecar.feature_file);
    let (rows, dim, values) = read_features(&feature_path)?;
    if dim != sidecar.feature_dim {
        return Err(DataError::DimensionMismatch {
            expected: sidecar.feature_dim,
            found: dim,
        });
    }
    let records = sidecar
        .records
        .into_iter()
        .map(|r| {
            if r.row_index >= rows {
                return Err(DataError::RowOutOfRange {
                    frame_id: r.frame_id,
                    row: r.row_index,
                    rows,
                });
            }
            let start = r.row_index * dim;
            Ok(FrameRecord {
                frame_id: r.frame_id,
                dataset_id: sidecar.dataset_id.clone(),
                class_label: r.class_label,
                binary_group: r.binary_group,
                feature: values[start..start + dim].to_vec(),
                split: r.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(sidecar.dataset_id, sidecar.classes, sidecar.feature_dim, records)
}

/// Write the sidecar at `path` and its feature file next to it.
pub fn store_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    let feature_file = format!("{stem}.capfeat");
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let rows: Vec<&[f32]> = manifest.records.iter().map(|r| r.feature.as_slice()).collect();
    write_features(&dir.join(&feature_file), manifest.feature_dim, &rows)?;

    let sidecar = Sidecar {
        dataset_id: manifest.dataset_id.clone(),
        feature_file,
        feature_dim: manifest.feature_dim,
        classes: manifest.classes.clone(),
        records: manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| SidecarRecord {
                frame_id: r.frame_id.clone(),
                class_label: r.class_label.clone(),
                binary_group: r.binary_group,
                split: r.split,
                row_index: i,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn class_stream(seed: u64, class: &str) -> SplitMix64 {
    SplitMix64::derive(seed, fnv1a64(class.as_bytes()))
}

/// Reduce every class above its cap to exactly the cap by seeded sampling
/// without replacement. Classes without a cap are untouched. Surviving
/// records keep their original order.
pub fn undersample(
    manifest: &DatasetManifest,
    caps: &BTreeMap<String, usize>,
    seed: u64,
) -> DatasetManifest {
    let mut keep: HashSet<&str> = HashSet::with_capacity(manifest.len());
    for (class, mut ids) in manifest.ids_by_class() {
        match caps.get(class) {
            Some(&cap) if ids.len() > cap => {
                let mut rng = class_stream(seed, class);
                // Partial Fisher-Yates: the first `cap` slots form the sample.
                for i in 0..cap {
                    let j = i + rng.below(ids.len() - i);
                    ids.swap(i, j);
                }
                keep.extend(&ids[..cap]);
            }
            _ => keep.extend(ids),
        }
    }
    manifest.with_records(
        manifest
            .records
            .iter()
            .filter(|r| keep.contains(r.frame_id.as_str()))
            .cloned()
            .collect(),
    )
}

/// Stratified train/validation partition. Each class contributes
/// `round(fraction · n)` records to training, clamped to `[1, n − 1]`.
pub fn split_train_val(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let mut train_ids: HashSet<&str> = HashSet::new();
    for (class, mut ids) in manifest.ids_by_class() {
        if ids.len() < 2 {
            return Err(DataError::ClassTooSmall {
                class: class.to_owned(),
                count: ids.len(),
            });
        }
        let n = ids.len();
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        class_stream(seed, class).shuffle(&mut ids);
        train_ids.extend(&ids[..n_train]);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for r in &manifest.records {
        let mut r = r.clone();
        if train_ids.contains(r.frame_id.as_str()) {
            r.split = Split::Train;
            train.push(r);
        } else {
            r.split = Split::Validation;
            val.push(r);
        }
    }
    Ok((manifest.with_records(train), manifest.with_records(val)))
}
