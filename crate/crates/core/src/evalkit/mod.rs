//! Downstream evaluation: leave-one-out KNN probing, prompt-based zero-shot
//! classification and text-to-image retrieval over an embedded test corpus.

mod knn;
mod retrieval;
mod zeroshot;

pub use knn::{evaluate_knn, knn_classify, KnnReport};
pub use retrieval::{
    evaluate_retrieval, rank_corpus, retrieve, ClassRetrieval, ExcludedQuery, QueryResult, RankedList,
    RetrievalMetrics, RetrievalReport,
};
pub use zeroshot::{
    evaluate_zero_shot, scaled_softmax, zero_shot_classify, PromptSetResult, ZeroShotOutput, ZeroShotReport,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignError, UnitEmbedding};
use crate::data::{BinaryGroup, FrameRecord};
use crate::encoders::{DualEncoder, EncoderError};
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("KNN with k = {k} needs more than {k} samples, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("K list is empty")]
    EmptyKList,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate frame id `{0}` in corpus")]
    DuplicateFrame(String),
    #[error("prompt set `{0}` is empty")]
    EmptyPromptSet(String),
    #[error("prompt set `{set}` has no prompt for class `{class}`")]
    MissingPrompt { set: String, class: String },
    #[error("prompt set `{set}` has a prompt for `{class}`, which is not a binary group")]
    NotABinaryGroup { set: String, class: String },
    #[error("prompt sets evaluated together must share one mode")]
    MixedPromptModes,
    #[error("no prompt sets given")]
    NoPromptSets,
    #[error("query target `{0}` is not a class of the evaluated dataset")]
    UnknownTarget(String),
    #[error("query set `{set}`: {message}")]
    BadQuery { set: String, message: String },
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
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Label space a prompt set classifies into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Prompts keyed by `Normal` / `Abnormal`.
    Binary,
    /// Prompts keyed by class label.
    Multiclass,
}

/// One prompt per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub name: String,
    pub mode: PromptMode,
    pub entries: BTreeMap<String, String>,
}

impl PromptSet {
    pub fn classes(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(EvalError::EmptyPromptSet(self.name.clone()));
        }
        if self.mode == PromptMode::Binary {
            if let Some(class) = self.entries.keys().find(|c| c.parse::<BinaryGroup>().is_err()) {
                return Err(EvalError::NotABinaryGroup {
                    set: self.name.clone(),
                    class: class.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Every abnormal frame is relevant.
    Coarse,
    /// Frames of one target class are relevant.
    Fine,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relevance {
    Coarse,
    Fine(String),
}

impl Relevance {
    pub fn is_relevant(&self, entry: &CorpusEntry) -> bool {
        match self {
            Relevance::Coarse => entry.binary_group == BinaryGroup::Abnormal,
            Relevance::Fine(target) => entry.class_label == *target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub text: String,
    pub relevance: Relevance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

/// A named list of retrieval queries of one granularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySet {
    pub name: String,
    pub mode: QueryMode,
    pub entries: Vec<QueryEntry>,
}

impl QuerySet {
    pub fn queries(&self) -> Result<Vec<RetrievalQuery>> {
        let bad = |message: String| EvalError::BadQuery {
            set: self.name.clone(),
            message,
        };
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let relevance = match (self.mode, &e.target) {
                    (QueryMode::Coarse, None) => Relevance::Coarse,
                    (QueryMode::Fine, Some(t)) => Relevance::Fine(t.clone()),
                    (QueryMode::Coarse, Some(_)) => {
                        return Err(bad(format!("entry {i}: coarse queries take no target")))
                    }
                    (QueryMode::Fine, None) => return Err(bad(format!("entry {i}: fine query needs a target"))),
                };
                Ok(RetrievalQuery {
                    text: e.text.clone(),
                    relevance,
                })
            })
            .collect()
    }
}

/// Files may hold one object or an array of them.
#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

fn load_json_list<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    // Parse twice on failure so the error points at the real location
    // instead of serde's generic untagged-enum message.
    match serde_json::from_str::<OneOrMany<T>>(&text) {
        Ok(OneOrMany::One(x)) => Ok(vec![x]),
        Ok(OneOrMany::Many(xs)) => Ok(xs),
        Err(_) => {
            let err = match text.trim_start().starts_with('[') {
                true => serde_json::from_str::<Vec<T>>(&text).err(),
                false => serde_json::from_str::<T>(&text).err(),
            };
            let e = err.expect("untagged parse failed but direct parse succeeded");
            Err(EvalError::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })
        }
    }
}

fn store_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_prompt_sets(path: &Path) -> Result<Vec<PromptSet>> {
    let sets: Vec<PromptSet> = load_json_list(path)?;
    sets.iter().try_for_each(PromptSet::validate)?;
    Ok(sets)
}

pub fn store_prompt_sets(path: &Path, sets: &[PromptSet]) -> Result<()> {
    store_json(path, &sets)
}

pub fn load_query_sets(path: &Path) -> Result<Vec<QuerySet>> {
    let sets: Vec<QuerySet> = load_json_list(path)?;
    for s in &sets {
        s.queries()?;
    }
    Ok(sets)
}

pub fn store_query_sets(path: &Path, sets: &[QuerySet]) -> Result<()> {
    store_json(path, &sets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub frame_id: String,
    pub class_label: String,
    pub binary_group: BinaryGroup,
    pub embedding: UnitEmbedding,
}

/// Embedded evaluation frames, held in ascending frame-id order so every
/// tie rule that falls back to frame id is a plain index comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    classes: Vec<String>,
}

impl Corpus {
    /// `classes` is the dataset's class list; labels outside it are added.
    pub fn new(mut entries: Vec<CorpusEntry>, classes: &[String]) -> Result<Self> {
        entries.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].frame_id == w[1].frame_id) {
            return Err(EvalError::DuplicateFrame(w[0].frame_id.clone()));
        }
        let mut all: BTreeSet<String> = classes.iter().cloned().collect();
        all.extend(entries.iter().map(|e| e.class_label.clone()));
        Ok(Self {
            entries,
            classes: all.into_iter().collect(),
        })
    }

    /// Embed frame features with the image head, in parallel.
    pub fn embed(records: &[FrameRecord], classes: &[String], encoder: &DualEncoder) -> Result<Self> {
        let entries = records
            .par_iter()
            .map(|r| {
                Ok(CorpusEntry {
                    frame_id: r.frame_id.clone(),
                    class_label: r.class_label.clone(),
                    binary_group: r.binary_group,
                    embedding: encoder.embed_image(&r.feature_f64())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, classes)
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Frames per class label.
    pub fn class_support(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = self.classes.iter().map(|c| (c.clone(), 0)).collect();
        for e in &self.entries {
            *counts.entry(e.class_label.clone()).or_default() += 1;
        }
        counts
    }
}
