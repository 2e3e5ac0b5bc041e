//! Label-to-caption pipeline: template filling from a class lexicon, caption
//! pools, round-robin caption assignment and the three pairing modes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BinaryGroup, FrameRecord};

pub const POOL_SCHEMA: &str = "capalign.pool.v1";
pub const DEFAULT_POOL_LIMIT: usize = 15;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("template `{template}` uses unknown slot `{slot}`")]
    UnknownSlot { template: String, slot: String },
    #[error("template `{0}` has an unterminated slot")]
    UnterminatedSlot(String),
    #[error("template `{0}` has no {{class_name}} slot")]
    MissingClassNameSlot(String),
    #[error("no template can be filled for class `{0}`")]
    NoUsableTemplate(String),
    #[error("caption pool for `{0}` is empty")]
    EmptyPool(String),
    #[error("caption pool for `{class}` repeats caption `{caption}`")]
    DuplicateCaption { class: String, caption: String },
    #[error("no caption pool for `{0}`")]
    MissingPool(String),
    #[error("class `{0}` appears more than once in the lexicon")]
    DuplicateClass(String),
    #[error("caption limit must be at least 1")]
    InvalidLimit,
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CaptionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    ClassName,
    VisualDescription,
    Synonyms,
    ParentCategory,
    ClinicalRelevance,
    SubPathologies,
}

impl FromStr for Slot {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Ok(match s {
            "class_name" => Slot::ClassName,
            "visual_description" => Slot::VisualDescription,
            "synonyms" => Slot::Synonyms,
            "parent_category" => Slot::ParentCategory,
            "clinical_relevance" => Slot::ClinicalRelevance,
            "sub_pathologies" => Slot::SubPathologies,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

/// A sentence skeleton with `{slot}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionTemplate {
    skeleton: String,
    pieces: Vec<Piece>,
}

impl CaptionTemplate {
    pub fn parse(skeleton: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut rest = skeleton;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                pieces.push(Piece::Text(rest[..open].to_owned()));
            }
            let after = &rest[open + 1..];
            let close = after
                .find('}')
                .ok_or_else(|| CaptionError::UnterminatedSlot(skeleton.to_owned()))?;
            let name = &after[..close];
            let slot = name.parse::<Slot>().map_err(|_| CaptionError::UnknownSlot {
                template: skeleton.to_owned(),
                slot: name.to_owned(),
            })?;
            pieces.push(Piece::Slot(slot));
            rest = &after[close + 1..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_owned()));
        }
        if !pieces.contains(&Piece::Slot(Slot::ClassName)) {
            return Err(CaptionError::MissingClassNameSlot(skeleton.to_owned()));
        }
        Ok(Self {
            skeleton: skeleton.to_owned(),
            pieces,
        })
    }

    pub fn skeleton(&self) -> &str {
        &self.skeleton
    }

    /// Fill every slot, or `None` if some slot has no content for this class.
    pub fn fill(&self, entry: &ClassLexicon) -> Option<String> {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(&entry.slot_value(*s)?),
            }
        }
        Some(out)
    }
}

/// Per-class nomenclature used to fill templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassLexicon {
    pub class_name: String,
    #[serde(default)]
    pub visual_description: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub parent_category: String,
    #[serde(default)]
    pub clinical_relevance: String,
    #[serde(default)]
    pub sub_pathologies: Vec<String>,
    pub binary_group: BinaryGroup,
}

impl ClassLexicon {
    fn slot_value(&self, slot: Slot) -> Option<String> {
        let text = |s: &str| {
            let s = s.trim();
            (!s.is_empty()).then(|| s.to_owned())
        };
        let list = |items: &[String]| {
            let kept: Vec<&str> = items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
            (!kept.is_empty()).then(|| kept.join(", "))
        };
        match slot {
            Slot::ClassName => text(&self.class_name),
            Slot::VisualDescription => text(&self.visual_description),
            Slot::Synonyms => list(&self.synonyms),
            Slot::ParentCategory => text(&self.parent_category),
            Slot::ClinicalRelevance => text(&self.clinical_relevance),
            Slot::SubPathologies => list(&self.sub_pathologies),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub classes: Vec<ClassLexicon>,
}

impl Lexicon {
    pub fn new(classes: Vec<ClassLexicon>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            if !seen.insert(c.class_name.as_str()) {
                return Err(CaptionError::DuplicateClass(c.class_name.clone()));
            }
        }
        Ok(Self { classes })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateRecord {
    skeleton: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    templates: Vec<TemplateRecord>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CaptionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CaptionError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("caption data serializes");
    fs::write(path, text + "\n").map_err(|source| CaptionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_templates(path: &Path) -> Result<Vec<CaptionTemplate>> {
    let file: TemplateFile = read_json(path)?;
    file.templates
        .iter()
        .map(|t| CaptionTemplate::parse(&t.skeleton))
        .collect()
}

pub fn store_templates(path: &Path, templates: &[CaptionTemplate]) -> Result<()> {
    let file = TemplateFile {
        templates: templates
            .iter()
            .map(|t| TemplateRecord {
                skeleton: t.skeleton.clone(),
            })
            .collect(),
    };
    write_json(path, &file)
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let lex: Lexicon = read_json(path)?;
    Lexicon::new(lex.classes)
}

pub fn store_lexicon(path: &Path, lexicon: &Lexicon) -> Result<()> {
    write_json(path, lexicon)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPool {
    pub class_name: String,
    pub captions: Vec<String>,
}

impl CaptionPool {
    pub fn validate(&self) -> Result<()> {
        if self.captions.is_empty() {
            return Err(CaptionError::EmptyPool(self.class_name.clone()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.captions {
            if !seen.insert(c.as_str()) {
                return Err(CaptionError::DuplicateCaption {
                    class: self.class_name.clone(),
                    caption: c.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Fill templates in order, skipping those with an empty slot for this
/// class and any caption already produced, then keep the first `limit`.
pub fn generate_pool(
    templates: &[CaptionTemplate],
    entry: &ClassLexicon,
    limit: usize,
) -> Result<CaptionPool> {
    if limit == 0 {
        return Err(CaptionError::InvalidLimit);
    }
    let mut captions: Vec<String> = Vec::new();
    for t in templates {
        if captions.len() == limit {
            break;
        }
        if let Some(c) = t.fill(entry) {
            if !captions.contains(&c) {
                captions.push(c);
            }
        }
    }
    if captions.is_empty() {
        return Err(CaptionError::NoUsableTemplate(entry.class_name.clone()));
    }
    Ok(CaptionPool {
        class_name: entry.class_name.clone(),
        captions,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolFile {
    schema: String,
    class_name: String,
    captions: Vec<String>,
}

/// File name used for a class's pool: `pool_<slug>_<hash8>.json`, the hash keeping case variants apart.
pub fn pool_file_name(class_name: &str) -> String {
    let slug: String = class_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    format!("pool_{slug}_{:08x}.json", crate::encoders::fnv1a64(class_name.as_bytes()) as u32)
}

pub fn store_pool(dir: &Path, pool: &CaptionPool) -> Result<PathBuf> {
    let path = dir.join(pool_file_name(&pool.class_name));
    write_json(
        &path,
        &PoolFile {
            schema: POOL_SCHEMA.into(),
            class_name: pool.class_name.clone(),
            captions: pool.captions.clone(),
        },
    )?;
    Ok(path)
}

pub fn load_pool(path: &Path) -> Result<CaptionPool> {
    let file: PoolFile = read_json(path)?;
    if file.schema != POOL_SCHEMA {
        return Err(CaptionError::Parse {
            path: path.to_path_buf(),
            line: 0,
            column: 0,
            message: format!("unsupported schema `{}`", file.schema),
        });
    }
    let pool = CaptionPool {
        class_name: file.class_name,
        captions: file.captions,
    };
    pool.validate()?;
    Ok(pool)
}

/// Class pools plus the Normal/Abnormal pools used for binary pairing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptionPools {
    pub classes: BTreeMap<String, CaptionPool>,
    pub binary: BTreeMap<BinaryGroup, CaptionPool>,
}

impl CaptionPools {
    /// Pools named exactly `Normal` or `Abnormal` also serve the binary groups.
    pub fn from_pools(pools: impl IntoIterator<Item = CaptionPool>) -> Result<Self> {
        let mut out = Self::default();
        for pool in pools {
            pool.validate()?;
            if let Ok(group) = pool.class_name.parse::<BinaryGroup>() {
                out.binary.insert(group, pool.clone());
            }
            let name = pool.class_name.clone();
            if out.classes.insert(name.clone(), pool).is_some() {
                return Err(CaptionError::DuplicateClass(name));
            }
        }
        Ok(out)
    }

    /// Every `pool_*.json` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let io = |source| CaptionError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("pool_") && n.ends_with(".json"))
            })
            .collect();
        paths.sort();
        let pools = paths.iter().map(|p| load_pool(p)).collect::<Result<Vec<_>>>()?;
        Self::from_pools(pools)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairingMode {
    /// Normal/Abnormal captions only.
    B,
    /// Per-class captions only.
    M,
    /// One binary and one per-class pair for every frame.
    #[serde(rename = "MIX")]
    Mix,
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingMode::B => "B",
            PairingMode::M => "M",
            PairingMode::Mix => "MIX",
        })
    }
}

impl FromStr for PairingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "B" => Ok(PairingMode::B),
            "M" => Ok(PairingMode::M),
            "MIX" => Ok(PairingMode::Mix),
            _ => Err(format!("unknown pairing mode `{s}` (expected B, M or MIX)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTextPair {
    pub frame_id: String,
    pub caption: String,
    pub pairing_label: String,
    pub kind: PairKind,
}

/// Round-robin assignment over frames sorted by id, so caption usage counts
/// differ by at most one.
pub fn assign_uniform(
    frames: &[&str],
    pool: &CaptionPool,
    kind: PairKind,
) -> Result<Vec<ImageTextPair>> {
    if pool.captions.is_empty() {
        return Err(CaptionError::EmptyPool(pool.class_name.clone()));
    }
    let mut sorted = frames.to_vec();
    sorted.sort_unstable();
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| ImageTextPair {
            frame_id: id.to_owned(),
            caption: pool.captions[i % pool.captions.len()].clone(),
            pairing_label: pool.class_name.clone(),
            kind,
        })
        .collect())
}

fn binary_pairs(frames: &[FrameRecord], pools: &CaptionPools) -> Result<Vec<ImageTextPair>> {
    let mut out = Vec::new();
    for group in BinaryGroup::all() {
        let ids: Vec<&str> = frames
            .iter()
            .filter(|f| f.binary_group == group)
            .map(|f| f.frame_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        let pool = pools
            .binary
            .get(&group)
            .ok_or_else(|| CaptionError::MissingPool(group.to_string()))?;
        out.extend(assign_uniform(&ids, pool, PairKind::Binary)?);
    }
    Ok(out)
}

fn multiclass_pairs(frames: &[FrameRecord], pools: &CaptionPools) -> Result<Vec<ImageTextPair>> {
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for f in frames {
        by_class
            .entry(f.class_label.as_str())
            .or_default()
            .push(f.frame_id.as_str());
    }
    let mut out = Vec::new();
    for (class, ids) in by_class {
        let pool = pools
            .classes
            .get(class)
            .ok_or_else(|| CaptionError::MissingPool(class.to_owned()))?;
        out.extend(assign_uniform(&ids, pool, PairKind::Multiclass)?);
    }
    Ok(out)
}

/// Image-text pairs for `frames` under a pairing mode. `MIX` yields the
/// binary pairs followed by the multiclass pairs.
pub fn build_pairs(
    frames: &[FrameRecord],
    pools: &CaptionPools,
    mode: PairingMode,
) -> Result<Vec<ImageTextPair>> {
    match mode {
        PairingMode::B => binary_pairs(frames, pools),
        PairingMode::M => multiclass_pairs(frames, pools),
        PairingMode::Mix => {
            let mut out = binary_pairs(frames, pools)?;
            out.extend(multiclass_pairs(frames, pools)?);
            Ok(out)
        }
    }
}
