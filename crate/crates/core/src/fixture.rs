//! Synthetic labelled dataset with a known answer: one orthogonal unit
//! centroid per class plus isotropic Gaussian noise, a matching caption
//! lexicon, five templates, prompt sets and retrieval queries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::captions::{
    self, generate_pool, CaptionError, CaptionPools, CaptionTemplate, ClassLexicon, Lexicon,
    DEFAULT_POOL_LIMIT,
};
use crate::data::{self, BinaryGroup, DataError, DatasetManifest, FrameRecord, Split};
use crate::evalkit::{self, EvalError, PromptMode, PromptSet, QueryEntry, QueryMode, QuerySet};
use crate::matrix::{dot, norm};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("feature dim {dim} cannot hold {classes} orthogonal centroids")]
    DimTooSmall { dim: usize, classes: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, FixtureError>;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            train_per_class: 200,
            test_per_class: 100,
            feature_dim: 32,
            noise_std: 0.15,
            seed: 2024,
        }
    }
}

/// Everything needed to run the full pipeline on synthetic data.
#[derive(Debug, Clone)]
pub struct Fixture {
    /// Train records (`split = train`) followed by held-out `test` records.
    pub manifest: DatasetManifest,
    pub templates: Vec<CaptionTemplate>,
    pub lexicon: Lexicon,
    pub pools: CaptionPools,
    pub multiclass_prompts: Vec<PromptSet>,
    pub binary_prompts: Vec<PromptSet>,
    pub coarse_queries: QuerySet,
    pub fine_queries: QuerySet,
}

/// Paths written by [`Fixture::write`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub manifest: PathBuf,
    pub templates: PathBuf,
    pub lexicon: PathBuf,
    pub pools: PathBuf,
    pub multiclass_prompts: PathBuf,
    pub binary_prompts: PathBuf,
    pub coarse_queries: PathBuf,
    pub fine_queries: PathBuf,
}

struct ClassSpec {
    name: &'static str,
    group: BinaryGroup,
    description: &'static str,
    synonyms: &'static [&'static str],
    parent: &'static str,
    relevance: &'static str,
}

const CLASSES: [ClassSpec; 4] = [
    ClassSpec {
        name: "normal",
        group: BinaryGroup::Normal,
        description: "smooth pink mucosa with visible villi",
        synonyms: &["healthy mucosa", "unremarkable tissue"],
        parent: "normal anatomy",
        relevance: "no follow up needed",
    },
    ClassSpec {
        name: "polyp",
        group: BinaryGroup::Abnormal,
        description: "raised rounded growth protruding from the wall",
        synonyms: &["polypoid growth", "protruding mass"],
        parent: "protruding lesion",
        relevance: "possible precursor of cancer",
    },
    ClassSpec {
        name: "ulcer",
        group: BinaryGroup::Abnormal,
        description: "white fibrin crater with a red rim",
        synonyms: &["mucosal break", "erosion"],
        parent: "mucosal lesion",
        relevance: "sign of inflammatory disease",
    },
    ClassSpec {
        name: "bleeding",
        group: BinaryGroup::Abnormal,
        description: "fresh red blood filling the lumen",
        synonyms: &["hemorrhage", "active blood"],
        parent: "vascular finding",
        relevance: "requires urgent attention",
    },
];

const TEMPLATES: [&str; 5] = [
    "a capsule endoscopy frame showing {class_name}",
    "{class_name}: {visual_description}",
    "an image of {class_name}, also called {synonyms}",
    "{class_name}, a {parent_category}",
    "{class_name} seen in the small bowel, {clinical_relevance}",
];

fn lexicon_entry(c: &ClassSpec) -> ClassLexicon {
    ClassLexicon {
        class_name: c.name.to_owned(),
        visual_description: c.description.to_owned(),
        synonyms: c.synonyms.iter().map(|s| s.to_string()).collect(),
        parent_category: c.parent.to_owned(),
        clinical_relevance: c.relevance.to_owned(),
        sub_pathologies: Vec::new(),
        binary_group: c.group,
    }
}

fn binary_lexicon() -> [ClassLexicon; 2] {
    let entry = |group: BinaryGroup, description: &str, synonyms: &[&str], parent: &str| ClassLexicon {
        class_name: group.as_str().to_owned(),
        visual_description: description.to_owned(),
        synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
        parent_category: parent.to_owned(),
        clinical_relevance: String::new(),
        sub_pathologies: Vec::new(),
        binary_group: group,
    };
    [
        entry(
            BinaryGroup::Normal,
            "clean mucosa without lesions",
            &["healthy", "unremarkable"],
            "normal finding",
        ),
        entry(
            BinaryGroup::Abnormal,
            "a lesion such as a polyp, ulcer or bleeding",
            &["pathological", "diseased"],
            "abnormal finding",
        ),
    ]
}

/// `count` orthonormal vectors in `dim` dimensions (Gram-Schmidt on
/// Gaussian draws).
fn orthonormal(count: usize, dim: usize, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn prompt_sets() -> (Vec<PromptSet>, Vec<PromptSet>) {
    let multiclass_styles: [fn(&ClassSpec) -> String; 5] = [
        |c| c.name.to_owned(),
        |c| format!("an endoscopy frame showing {}", c.name),
        |c| format!("a photo of {}", c.synonyms[0]),
        |c| c.description.to_owned(),
        |c| format!("capsule endoscopy image of {}, a {}", c.name, c.parent),
    ];
    let multiclass = multiclass_styles
        .iter()
        .enumerate()
        .map(|(i, style)| PromptSet {
            name: format!("multiclass-{}", i + 1),
            mode: PromptMode::Multiclass,
            entries: CLASSES.iter().map(|c| (c.name.to_owned(), style(c))).collect(),
        })
        .collect();
    let binary_pairs = [
        ("normal", "abnormal"),
        ("a normal frame", "an abnormal frame"),
        ("healthy mucosa", "a polyp, ulcer or bleeding"),
        ("clean mucosa without lesions", "a lesion such as a polyp, ulcer or bleeding"),
        ("an unremarkable capsule endoscopy frame", "a pathological capsule endoscopy frame"),
    ];
    let binary = binary_pairs
        .iter()
        .enumerate()
        .map(|(i, (n, a))| PromptSet {
            name: format!("binary-{}", i + 1),
            mode: PromptMode::Binary,
            entries: BTreeMap::from([
                (BinaryGroup::Normal.as_str().to_owned(), n.to_string()),
                (BinaryGroup::Abnormal.as_str().to_owned(), a.to_string()),
            ]),
        })
        .collect();
    (multiclass, binary)
}

fn query_sets() -> (QuerySet, QuerySet) {
    let openers = [
        "a frame showing",
        "find images with",
        "capsule endoscopy view of",
        "small bowel frame containing",
        "abnormal finding:",
    ];
    let terms: Vec<&str> = CLASSES
        .iter()
        .filter(|c| c.group == BinaryGroup::Abnormal)
        .flat_map(|c| std::iter::once(c.name).chain(c.synonyms.iter().copied()))
        .chain(["a lesion"])
        .collect();
    let coarse = QuerySet {
        name: "coarse".into(),
        mode: QueryMode::Coarse,
        entries: openers
            .iter()
            .flat_map(|o| terms.iter().map(move |t| format!("{o} {t}")))
            .map(|text| QueryEntry { text, target: None })
            .collect(),
    };
    let fine = QuerySet {
        name: "fine".into(),
        mode: QueryMode::Fine,
        entries: CLASSES
            .iter()
            .filter(|c| c.group == BinaryGroup::Abnormal)
            .flat_map(|c| {
                [
                    c.name.to_owned(),
                    format!("a frame showing {}", c.name),
                    format!("{}: {}", c.name, c.description),
                    format!("an image of {}", c.synonyms[0]),
                    format!("{}, a {}", c.name, c.parent),
                ]
                .into_iter()
                .map(|text| QueryEntry {
                    text,
                    target: Some(c.name.to_owned()),
                })
            })
            .collect(),
    };
    (coarse, fine)
}

pub fn synthetic(spec: &FixtureSpec) -> Result<Fixture> {
    if spec.feature_dim < CLASSES.len() {
        return Err(FixtureError::DimTooSmall {
            dim: spec.feature_dim,
            classes: CLASSES.len(),
        });
    }
    let mut rng = SplitMix64::new(spec.seed);
    let centroids = orthonormal(CLASSES.len(), spec.feature_dim, &mut rng);
    let mut records = Vec::new();
    for (split, prefix, count) in [
        (Split::Train, "", spec.train_per_class),
        (Split::Test, "test_", spec.test_per_class),
    ] {
        for (c, centroid) in CLASSES.iter().zip(&centroids) {
            for i in 0..count {
                let feature = centroid
                    .iter()
                    .map(|&m| (m + spec.noise_std * rng.next_gaussian()) as f32)
                    .collect();
                records.push(FrameRecord {
                    frame_id: format!("{prefix}{}_{i:04}", c.name),
                    dataset_id: String::new(),
                    class_label: c.name.to_owned(),
                    binary_group: c.group,
                    feature,
                    split,
                });
            }
        }
    }
    let classes = CLASSES.iter().map(|c| c.name.to_owned()).collect();
    let manifest = DatasetManifest::new("synthetic", classes, spec.feature_dim, records)?;

    let templates = TEMPLATES
        .iter()
        .map(|t| CaptionTemplate::parse(t))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut entries: Vec<ClassLexicon> = CLASSES.iter().map(lexicon_entry).collect();
    entries.extend(binary_lexicon());
    let lexicon = Lexicon::new(entries)?;
    let pools = CaptionPools::from_pools(
        lexicon
            .classes
            .iter()
            .map(|e| generate_pool(&templates, e, DEFAULT_POOL_LIMIT))
            .collect::<std::result::Result<Vec<_>, _>>()?,
    )?;
    let (multiclass_prompts, binary_prompts) = prompt_sets();
    let (coarse_queries, fine_queries) = query_sets();
    Ok(Fixture {
        manifest,
        templates,
        lexicon,
        pools,
        multiclass_prompts,
        binary_prompts,
        coarse_queries,
        fine_queries,
    })
}

impl Fixture {
    /// Write every artifact under `dir`; pools go to `dir/pools`.
    pub fn write(&self, dir: &Path) -> Result<FixturePaths> {
        let pools_dir = dir.join("pools");
        std::fs::create_dir_all(&pools_dir).map_err(|source| FixtureError::Io {
            path: pools_dir.clone(),
            source,
        })?;
        let paths = FixturePaths {
            manifest: dir.join("synthetic.json"),
            templates: dir.join("templates.json"),
            lexicon: dir.join("lexicon.json"),
            pools: pools_dir,
            multiclass_prompts: dir.join("prompts_multiclass.json"),
            binary_prompts: dir.join("prompts_binary.json"),
            coarse_queries: dir.join("queries_coarse.json"),
            fine_queries: dir.join("queries_fine.json"),
        };
        data::store_manifest(&self.manifest, &paths.manifest)?;
        captions::store_templates(&paths.templates, &self.templates)?;
        captions::store_lexicon(&paths.lexicon, &self.lexicon)?;
        for pool in self.pools.classes.values() {
            captions::store_pool(&paths.pools, pool)?;
        }
        evalkit::store_prompt_sets(&paths.multiclass_prompts, &self.multiclass_prompts)?;
        evalkit::store_prompt_sets(&paths.binary_prompts, &self.binary_prompts)?;
        evalkit::store_query_sets(&paths.coarse_queries, std::slice::from_ref(&self.coarse_queries))?;
        evalkit::store_query_sets(&paths.fine_queries, std::slice::from_ref(&self.fine_queries))?;
        Ok(paths)
    }
}
