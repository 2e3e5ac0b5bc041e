//! Command-line surface: caption pools, pairs, training, evaluation,
//! synthetic fixtures and report re-runs.
//!
//! Exit codes: 0 success, 2 invalid input or arguments, 3 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::captions::{self, build_pairs, generate_pool, CaptionError, CaptionPools, PairingMode};
use crate::data::{self, DataError, DatasetManifest, Split};
use crate::encoders::{fnv1a64, HeadMode, DEFAULT_BUCKET_COUNT};
use crate::evalkit::{
    self, evaluate_knn, evaluate_retrieval, evaluate_zero_shot, Corpus, EvalError, PromptMode, PromptSet,
    RetrievalMetrics,
};
use crate::fixture::{self, FixtureError, FixtureSpec};
use crate::metrics::{aggregate_prompt_sets, MetricsError, Prf1Report};
use crate::report::{self, MetricsReport, ReportError, ReportRow, RunManifest, SeedResult, Task};
use crate::trainer::{self, Checkpoint, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const THREADS_ENV: &str = "CAPALIGN_THREADS";

#[derive(Parser, Debug)]
#[command(name = "capalign", version, about = "Image-text alignment training and zero-shot evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate caption pool files from templates and a class lexicon
    Captions(CaptionsArgs),
    /// Build image-text pairs for a manifest and write them as JSON
    Pairs(PairsArgs),
    /// Train one checkpoint per seed
    Train(TrainArgs),
    /// Evaluate checkpoints on a downstream task
    Eval(EvalArgs),
    /// Write the synthetic fixture (manifest, lexicon, pools, prompts, queries)
    Synth(SynthArgs),
    /// Re-run the command recorded in a report
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
pub struct CaptionsArgs {
    #[arg(long)]
    pub templates: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Maximum captions per class
    #[arg(long, default_value_t = captions::DEFAULT_POOL_LIMIT)]
    pub limit: usize,
    /// Output directory for pool files
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PairsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of pool files
    #[arg(long)]
    pub pools: PathBuf,
    #[arg(long, default_value = "M")]
    pub mode: PairingMode,
    /// Output JSON file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadArg {
    Identity,
    Hidden,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub pools: PathBuf,
    #[arg(long, default_value = "M")]
    pub mode: PairingMode,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long = "batch-size", default_value_t = trainer::MAX_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long = "lr-max", default_value_t = 1e-3)]
    pub lr_max: f64,
    #[arg(long = "lr-min", default_value_t = 1e-5)]
    pub lr_min: f64,
    #[arg(long = "embed-dim", default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, value_enum, default_value_t = HeadArg::Identity)]
    pub head: HeadArg,
    /// Hidden width for `--head hidden` (defaults to the embedding dim)
    #[arg(long = "hidden-dim")]
    pub hidden_dim: Option<usize>,
    /// Hash buckets of the caption featurizer
    #[arg(long, default_value_t = DEFAULT_BUCKET_COUNT)]
    pub buckets: usize,
    /// Training share when the manifest has no validation records
    #[arg(long = "train-fraction", default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long = "shuffle-seed", default_value_t = 0)]
    pub shuffle_seed: u64,
    /// Output directory for checkpoints, training log and report
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Knn,
    Zeroshot,
    Retrieval,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub task: EvalTask,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint files, or directories searched for `*.ckpt`
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Prompt-set files (zeroshot)
    #[arg(long, num_args = 1..)]
    pub prompts: Vec<PathBuf>,
    /// Query-set files (retrieval)
    #[arg(long, num_args = 1..)]
    pub queries: Vec<PathBuf>,
    /// Neighbours for the KNN probe
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Cut-offs for P@K and R@K
    #[arg(long = "K-list", value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    pub k_list: Vec<usize>,
    /// Output directory for the report and plot data
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long = "train-per-class", default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long = "test-per-class", default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long = "feature-dim", default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.15)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    /// Report whose run manifest is replayed
    #[arg(long)]
    pub report: PathBuf,
    /// Replace the recorded output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error with its exit-code class.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<CaptionError> for CliError {
    fn from(e: CaptionError) -> Self {
        match e {
            CaptionError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Caption(e) => e.into(),
            TrainError::Data(e) => e.into(),
            TrainError::Io { .. } | TrainError::Diverged(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<FixtureError> for CliError {
    fn from(e: FixtureError) -> Self {
        match e {
            FixtureError::Caption(e) => e.into(),
            FixtureError::Data(e) => e.into(),
            FixtureError::Eval(e) => e.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Parse { .. } | ReportError::Schema { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `args` (without the program name), run, and return the exit code.
/// Messages go to stdout/stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    match execute(&args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn execute(args: &[String]) -> CliResult<()> {
    let cli = match Cli::try_parse_from(std::iter::once("capalign".to_owned()).chain(args.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.exit_code() {
                0 => Ok(()),
                _ => Err(CliError::Validation("invalid arguments".into())),
            };
        }
    };
    match cli.command {
        Command::Captions(a) => cmd_captions(&a),
        Command::Pairs(a) => cmd_pairs(&a),
        Command::Train(a) => cmd_train(&a, args),
        Command::Eval(a) => cmd_eval(&a, args),
        Command::Synth(a) => cmd_synth(&a),
        Command::Rerun(a) => cmd_rerun(&a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn cmd_captions(a: &CaptionsArgs) -> CliResult<()> {
    let templates = captions::load_templates(&a.templates)?;
    let lexicon = captions::load_lexicon(&a.lexicon)?;
    if a.limit == 0 {
        return Err(CaptionError::InvalidLimit.into());
    }
    let pools = lexicon
        .classes
        .iter()
        .map(|e| generate_pool(&templates, e, a.limit))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&a.out)?;
    for pool in &pools {
        let path = captions::store_pool(&a.out, pool)?;
        println!("{}\t{} captions\t{}", pool.class_name, pool.captions.len(), path.display());
    }
    Ok(())
}

pub fn cmd_pairs(a: &PairsArgs) -> CliResult<()> {
    let manifest = data::load_manifest(&a.manifest)?;
    let pools = CaptionPools::load_dir(&a.pools)?;
    let pairs = build_pairs(&manifest.records, &pools, a.mode)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&a.out, &pairs)?;
    println!("{} pairs ({} mode) -> {}", pairs.len(), a.mode, a.out.display());
    Ok(())
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            seeds: self.seeds.clone(),
            mode: self.mode,
            shuffle_seed: self.shuffle_seed,
            embed_dim: self.embed_dim,
            head_mode: match self.head {
                HeadArg::Identity => HeadMode::Identity,
                HeadArg::Hidden => HeadMode::Hidden,
            },
            hidden_dim: self.hidden_dim,
            bucket_count: self.buckets,
            train_fraction: self.train_fraction,
            ..TrainConfig::default()
        }
    }
}

pub fn checkpoint_file_name(seed: u64) -> String {
    format!("seed_{seed}.ckpt")
}

#[derive(Serialize)]
struct SeedLog<'a> {
    seed: u64,
    initial_val_loss: f64,
    best_epoch: u32,
    best_val_loss: f64,
    steps_per_epoch: usize,
    history: &'a [trainer::EpochRecord],
}

pub fn cmd_train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let config = a.config();
    config.validate()?;
    let manifest = data::load_manifest(&a.manifest)?;
    let pools = CaptionPools::load_dir(&a.pools)?;
    let runs = trainer::train_manifest(&manifest, &pools, &config)?;

    create_dir(&a.out)?;
    let mut per_seed = Vec::new();
    let mut log = Vec::new();
    for run in &runs {
        let path = a.out.join(checkpoint_file_name(run.seed));
        run.best.save(&path)?;
        println!(
            "seed {}: best epoch {} val loss {:.6} -> {}",
            run.seed,
            run.best.epoch,
            run.best.val_loss,
            path.display()
        );
        log.push(SeedLog {
            seed: run.seed,
            initial_val_loss: run.initial_val_loss,
            best_epoch: run.best.epoch,
            best_val_loss: run.best.val_loss,
            steps_per_epoch: run.steps_per_epoch,
            history: &run.history,
        });
        per_seed.push(SeedResult {
            seed: run.seed,
            checkpoint: path.display().to_string(),
            scalars: BTreeMap::from([
                ("initial_val_loss".to_owned(), run.initial_val_loss),
                ("best_val_loss".to_owned(), run.best.val_loss),
                ("best_epoch".to_owned(), run.best.epoch as f64),
                ("temperature".to_owned(), run.best.params.temperature()),
            ]),
            rows: run
                .history
                .iter()
                .map(|h| ReportRow {
                    label: format!("epoch {}", h.epoch),
                    values: BTreeMap::from([
                        ("train_loss".to_owned(), h.train_loss),
                        ("val_loss".to_owned(), h.val_loss),
                        ("temperature".to_owned(), h.temperature),
                    ]),
                })
                .collect(),
        });
    }
    write_json(&a.out.join("training_log.json"), &log)?;
    let inputs = report::hash_inputs(&[a.manifest.clone(), a.pools.clone()])?;
    let run = RunManifest::new("train", argv, config.fingerprint(), inputs, config.seeds.clone());
    MetricsReport::new(Task::Train, run, per_seed).save(&a.out.join("train_report.json"))?;
    Ok(())
}

/// Checkpoint paths in argument order; directories expand to their
/// `*.ckpt` files in name order.
fn checkpoint_paths(args: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in args {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ckpt"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Validation("no checkpoint files found".into()));
    }
    Ok(out)
}

/// Frames evaluated: the test split when present, otherwise every record.
pub fn evaluation_frames(manifest: &DatasetManifest) -> DatasetManifest {
    let test = manifest.filter_split(Split::Test);
    if test.is_empty() {
        manifest.clone()
    } else {
        test
    }
}

fn prf1_scalars(prefix: &str, r: &Prf1Report) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (name, s) in [("macro", r.macro_avg), ("weighted", r.weighted)] {
        m.insert(format!("{prefix}{name}_precision"), s.precision);
        m.insert(format!("{prefix}{name}_recall"), s.recall);
        m.insert(format!("{prefix}{name}_f1"), s.f1);
    }
    m
}

fn mode_name(mode: PromptMode) -> &'static str {
    match mode {
        PromptMode::Binary => "binary",
        PromptMode::Multiclass => "multiclass",
    }
}

fn retrieval_scalars(prefix: &str, m: &RetrievalMetrics, k_list: &[usize]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::from([(format!("{prefix}map"), m.map)]);
    for (i, k) in k_list.iter().enumerate() {
        out.insert(format!("{prefix}P@{k}"), m.precision_at[i]);
        out.insert(format!("{prefix}R@{k}"), m.recall_at[i]);
    }
    out
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    task: EvalTask,
    k: usize,
    k_list: &'a [usize],
}

pub fn cmd_eval(a: &EvalArgs, argv: &[String]) -> CliResult<()> {
    let manifest = data::load_manifest(&a.manifest)?;
    let frames = evaluation_frames(&manifest);
    let ckpt_paths = checkpoint_paths(&a.checkpoints)?;
    let checkpoints = ckpt_paths
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>, _>>()?;

    let prompt_sets: Vec<PromptSet> = match a.task {
        EvalTask::Zeroshot => {
            if a.prompts.is_empty() {
                return Err(CliError::Validation("zeroshot evaluation needs --prompts".into()));
            }
            let mut sets = Vec::new();
            for p in &a.prompts {
                sets.extend(evalkit::load_prompt_sets(p)?);
            }
            sets
        }
        _ => Vec::new(),
    };
    let query_sets = match a.task {
        EvalTask::Retrieval => {
            if a.queries.is_empty() {
                return Err(CliError::Validation("retrieval evaluation needs --queries".into()));
            }
            let mut sets = Vec::new();
            for p in &a.queries {
                sets.extend(evalkit::load_query_sets(p)?);
            }
            sets
        }
        _ => Vec::new(),
    };

    create_dir(&a.out)?;
    let curves_dir = a.out.join("curves");
    let mut per_seed = Vec::new();
    let mut excluded = Vec::new();
    for (ckpt, path) in checkpoints.iter().zip(&ckpt_paths) {
        let encoder = ckpt.encoder()?;
        let corpus = Corpus::embed(&frames.records, &frames.classes, &encoder)?;
        let mut scalars = BTreeMap::new();
        let mut rows = Vec::new();
        match a.task {
            EvalTask::Knn => {
                let r = evaluate_knn(&corpus, a.k)?;
                scalars = prf1_scalars("", &r.scores);
                rows = r
                    .scores
                    .per_class
                    .iter()
                    .map(|c| ReportRow {
                        label: c.class.clone(),
                        values: BTreeMap::from([
                            ("precision".to_owned(), c.scores.precision),
                            ("recall".to_owned(), c.scores.recall),
                            ("f1".to_owned(), c.scores.f1),
                            ("support".to_owned(), c.support as f64),
                        ]),
                    })
                    .collect();
            }
            EvalTask::Zeroshot => {
                let mut by_mode: BTreeMap<&str, Vec<PromptSet>> = BTreeMap::new();
                for s in &prompt_sets {
                    by_mode.entry(mode_name(s.mode)).or_default().push(s.clone());
                }
                for (mode, sets) in by_mode {
                    let r = evaluate_zero_shot(&corpus, &sets, &encoder)?;
                    scalars.insert(format!("{mode}.macro_f1.mean"), r.macro_f1.mean);
                    scalars.insert(format!("{mode}.weighted_f1.mean"), r.weighted_f1.mean);
                    scalars.insert(format!("{mode}.weighted_f1.std"), r.weighted_f1.std);
                    if let (Some(roc), Some(pr)) = (r.auroc, r.auprc) {
                        scalars.insert(format!("{mode}.auroc.mean"), roc.mean);
                        scalars.insert(format!("{mode}.auprc.mean"), pr.mean);
                    }
                    for s in &r.sets {
                        let mut values = prf1_scalars("", &s.scores);
                        if let (Some(roc), Some(pr)) = (s.auroc, s.auprc) {
                            values.insert("auroc".into(), roc);
                            values.insert("auprc".into(), pr);
                        }
                        rows.push(ReportRow {
                            label: format!("{mode}/{}", s.name),
                            values,
                        });
                        for (kind, curve) in [("roc", &s.roc), ("pr", &s.pr)] {
                            if let Some(c) = curve {
                                create_dir(&curves_dir)?;
                                let name = format!("seed{}_{}_{kind}.csv", ckpt.seed, s.name);
                                report::write_curve_csv(&curves_dir.join(name), c)?;
                            }
                        }
                    }
                    for (kind, curve) in [("roc", &r.mean_roc), ("pr", &r.mean_pr)] {
                        if let Some(c) = curve {
                            create_dir(&curves_dir)?;
                            let name = format!("seed{}_{mode}_mean_{kind}.csv", ckpt.seed);
                            report::write_mean_curve_csv(&curves_dir.join(name), c)?;
                        }
                    }
                }
            }
            EvalTask::Retrieval => {
                let mut queries = Vec::new();
                let mut labels = Vec::new();
                for set in &query_sets {
                    for (i, q) in set.queries()?.into_iter().enumerate() {
                        labels.push((format!("{}#{i:03} {}", set.name, q.text), q.clone()));
                        queries.push(q);
                    }
                }
                let r = evaluate_retrieval(&queries, &corpus, &encoder, &a.k_list)?;
                for (prefix, m) in [("mean.", &r.mean), ("macro.", &r.macro_avg), ("weighted.", &r.weighted)] {
                    if let Some(m) = m {
                        scalars.extend(retrieval_scalars(prefix, m, &a.k_list));
                    }
                }
                // Scored queries keep their input order, so walk both lists together.
                let mut scored = r.queries.iter().peekable();
                for (label, q) in &labels {
                    if let Some(res) = scored.next_if(|res| res.text == q.text && res.relevance == q.relevance) {
                        rows.push(ReportRow {
                            label: label.clone(),
                            values: retrieval_scalars("", &res.metrics, &a.k_list),
                        });
                    }
                }
                for c in &r.per_class {
                    rows.push(ReportRow {
                        label: format!("class/{}", c.class),
                        values: retrieval_scalars("", &c.metrics, &a.k_list),
                    });
                }
                excluded = r.excluded;
            }
        }
        per_seed.push(SeedResult {
            seed: ckpt.seed,
            checkpoint: path.display().to_string(),
            scalars,
            rows,
        });
    }

    let settings = EvalSettings {
        task: a.task,
        k: a.k,
        k_list: &a.k_list,
    };
    let fingerprint = fnv1a64(serde_json::to_string(&settings).expect("settings serialize").as_bytes());
    let mut inputs = vec![a.manifest.clone()];
    inputs.extend(ckpt_paths.iter().cloned());
    inputs.extend(a.prompts.iter().cloned());
    inputs.extend(a.queries.iter().cloned());
    let seeds = checkpoints.iter().map(|c| c.seed).collect();
    let run = RunManifest::new("eval", argv, fingerprint, report::hash_inputs(&inputs)?, seeds);
    let task = match a.task {
        EvalTask::Knn => Task::Knn,
        EvalTask::Zeroshot => Task::ZeroShotCls,
        EvalTask::Retrieval => Task::Retrieval,
    };
    let mut report = MetricsReport::new(task, run, per_seed);
    if a.task == EvalTask::Zeroshot {
        for mode in ["binary", "multiclass"] {
            for metric in ["macro_f1", "weighted_f1", "auroc", "auprc"] {
                let values: Vec<f64> = report
                    .rows
                    .iter()
                    .filter(|r| r.label.starts_with(&format!("{mode}/")))
                    .filter_map(|r| r.values.get(metric).copied())
                    .collect();
                if !values.is_empty() {
                    report
                        .prompt_set_aggregates
                        .insert(format!("{mode}.{metric}"), aggregate_prompt_sets(&values)?);
                }
            }
        }
    }
    report.excluded_count = excluded.len();
    report.excluded_queries = excluded;

    let name = match a.task {
        EvalTask::Knn => "report_knn.json",
        EvalTask::Zeroshot => "report_zeroshot.json",
        EvalTask::Retrieval => "report_retrieval.json",
    };
    let path = a.out.join(name);
    report.save(&path)?;
    for (k, v) in &report.cross_seed_mean {
        println!("{k}\t{v:.6}");
    }
    if report.excluded_count > 0 {
        println!("excluded queries (no relevant frames)\t{}", report.excluded_count);
    }
    println!("report -> {}", path.display());
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let spec = FixtureSpec {
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        feature_dim: a.feature_dim,
        noise_std: a.noise,
        seed: a.seed,
    };
    let f = fixture::synthetic(&spec)?;
    create_dir(&a.out)?;
    let paths = f.write(&a.out)?;
    println!("manifest\t{}", paths.manifest.display());
    println!("templates\t{}", paths.templates.display());
    println!("lexicon\t{}", paths.lexicon.display());
    println!("pools\t{}", paths.pools.display());
    println!("prompts\t{}\t{}", paths.multiclass_prompts.display(), paths.binary_prompts.display());
    println!("queries\t{}\t{}", paths.coarse_queries.display(), paths.fine_queries.display());
    Ok(())
}

/// Recorded arguments with `--out` replaced when an override is given.
fn rerun_args(recorded: &[String], out: Option<&Path>) -> Vec<String> {
    let Some(out) = out else {
        return recorded.to_vec();
    };
    let out = out.display().to_string();
    let mut args = Vec::with_capacity(recorded.len() + 2);
    let mut replaced = false;
    let mut iter = recorded.iter();
    while let Some(a) = iter.next() {
        if a == "--out" {
            iter.next();
            args.extend(["--out".to_owned(), out.clone()]);
            replaced = true;
        } else if a.starts_with("--out=") {
            args.push(format!("--out={out}"));
            replaced = true;
        } else {
            args.push(a.clone());
        }
    }
    if !replaced {
        args.extend(["--out".to_owned(), out]);
    }
    args
}

pub fn cmd_rerun(a: &RerunArgs) -> CliResult<()> {
    let report = MetricsReport::load(&a.report)?;
    let args = rerun_args(&report.run.args, a.out.as_deref());
    if args.first().map(String::as_str) == Some("rerun") {
        return Err(CliError::Validation("recorded command is itself a rerun".into()));
    }
    execute(&args)
}

/// Cap rayon's global pool from `CAPALIGN_THREADS`, if set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Validation(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerun_replaces_out() {
        let rec: Vec<String> = ["eval", "knn", "--out", "a", "--k", "3"].map(String::from).to_vec();
        assert_eq!(
            rerun_args(&rec, Some(Path::new("b"))),
            ["eval", "knn", "--out", "b", "--k", "3"].map(String::from).to_vec()
        );
        assert_eq!(rerun_args(&rec, None), rec);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn defaults_match_training_defaults() {
        let cli = Cli::try_parse_from(["capalign", "train", "--manifest", "m", "--pools", "p", "--out", "o"]).unwrap();
        let Command::Train(a) = cli.command else {
            panic!("expected train");
        };
        let c = a.config();
        let d = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.seeds.clone()), (d.epochs, d.batch_size, d.seeds.clone()));
        assert_eq!((c.lr_max, c.lr_min, c.mode), (d.lr_max, d.lr_min, d.mode));
    }

    #[test]
    fn mistyped_mode_is_a_validation_error() {
        assert_eq!(
            run(["pairs", "--manifest", "m", "--pools", "p", "--mode", "Q", "--out", "o"]),
            EXIT_VALIDATION
        );
    }
}
