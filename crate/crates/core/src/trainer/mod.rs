//! Contrastive training loop: seeded mini-batching, Adam with a cosine
//! learning-rate schedule, per-epoch validation loss and best-checkpoint
//! selection, repeated for every configured seed.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{self, clamp_log_inv_tau, AlignError};
use crate::captions::{build_pairs, CaptionError, CaptionPools, ImageTextPair, PairingMode};
use crate::data::{split_train_val, DataError, DatasetManifest, Split};
use crate::encoders::{
    featurize_text, fnv1a64, init_params, EncoderDims, EncoderError, EncoderParams, HeadMode,
    TextFeaturizerConfig, DEFAULT_BUCKET_COUNT,
};
use crate::matrix::Matrix;
use crate::rng::SplitMix64;

pub const MAX_BATCH_SIZE: usize = 128;
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 training pairs, got {0}")]
    TooFewPairs(usize),
    #[error("need at least 2 validation pairs, got {0}")]
    NoValidationPairs(usize),
    #[error("no feature vector for frame `{0}`")]
    MissingFeature(String),
    #[error("shape mismatch: {params} params, {grads} grads, {state} optimizer slots")]
    ShapeMismatch {
        params: usize,
        grads: usize,
        state: usize,
    },
    #[error("checkpoint byte {offset}: {message}")]
    BadCheckpoint { offset: usize, message: String },
    #[error("checkpoint fingerprint {stored:016x} does not match {computed:016x}")]
    FingerprintMismatch {
        stored: u64,
        computed: u64,
        offset: usize,
    },
    #[error("parameters diverged (non-finite) at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seeds: Vec<u64>,
    pub adam: AdamConfig,
    pub mode: PairingMode,
    /// Mixed into every seed's batch-order stream.
    pub shuffle_seed: u64,
    pub embed_dim: usize,
    pub head_mode: HeadMode,
    /// Defaults to `embed_dim` when absent.
    pub hidden_dim: Option<usize>,
    pub bucket_count: usize,
    /// Training share of the per-seed stratified split, used when the
    /// manifest carries no validation records.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: MAX_BATCH_SIZE,
            lr_max: 1e-3,
            lr_min: 1e-5,
            seeds: vec![1, 2, 3],
            adam: AdamConfig::default(),
            mode: PairingMode::M,
            shuffle_seed: 0,
            embed_dim: 64,
            head_mode: HeadMode::Identity,
            hidden_dim: None,
            bucket_count: DEFAULT_BUCKET_COUNT,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_owned()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(2..=MAX_BATCH_SIZE).contains(&self.batch_size) {
            return bad("batch size must lie in [2, 128]");
        }
        if !(self.lr_max.is_finite() && self.lr_min.is_finite()) || self.lr_min < 0.0 {
            return bad("learning rates must be finite and non-negative");
        }
        if self.lr_min > self.lr_max {
            return bad("lr_min must not exceed lr_max");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.embed_dim == 0 || self.hidden_dim == Some(0) {
            return bad("embedding and hidden widths must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must lie strictly between 0 and 1");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        TextFeaturizerConfig::new(self.bucket_count)?;
        Ok(())
    }

    pub(crate) fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }

    pub fn featurizer(&self) -> Result<TextFeaturizerConfig> {
        Ok(TextFeaturizerConfig::new(self.bucket_count)?)
    }

    fn dims(&self, image_dim: usize) -> EncoderDims {
        EncoderDims {
            image_dim,
            text_dim: self.bucket_count,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim.unwrap_or(self.embed_dim),
            mode: self.head_mode,
        }
    }
}

/// `lr_min + (lr_max − lr_min)·(1 + cos(π·step/total))/2`
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let progress = (step as f64 / total).min(1.0);
    lr_min + (lr_max - lr_min) * (1.0 + (PI * progress).cos()) / 2.0
}

/// Per-frame image features keyed by frame id.
pub type FeatureTable = HashMap<String, Vec<f64>>;

pub fn feature_table(manifest: &DatasetManifest) -> FeatureTable {
    manifest
        .records
        .iter()
        .map(|r| (r.frame_id.clone(), r.feature_f64()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub temperature: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub seed: u64,
    pub best: Checkpoint,
    pub initial_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub steps_per_epoch: usize,
    pub final_params: EncoderParams,
}

/// Pre-resolved inputs for one batch of pairs.
struct PairTensors {
    images: Vec<Vec<f64>>,
    texts: Vec<Vec<f64>>,
}

impl PairTensors {
    fn build(pairs: &[ImageTextPair], features: &FeatureTable, featurizer: &TextFeaturizerConfig) -> Result<Self> {
        let mut text_cache: HashMap<&str, Vec<f64>> = HashMap::new();
        let mut images = Vec::with_capacity(pairs.len());
        let mut texts = Vec::with_capacity(pairs.len());
        for p in pairs {
            let f = features
                .get(&p.frame_id)
                .ok_or_else(|| TrainError::MissingFeature(p.frame_id.clone()))?;
            images.push(f.clone());
            if !text_cache.contains_key(p.caption.as_str()) {
                text_cache.insert(&p.caption, featurize_text(&p.caption, featurizer)?);
            }
            texts.push(text_cache[p.caption.as_str()].clone());
        }
        Ok(Self { images, texts })
    }

    fn gather(&self, idx: &[usize]) -> (Matrix, Matrix) {
        let img: Vec<&[f64]> = idx.iter().map(|&i| self.images[i].as_slice()).collect();
        let txt: Vec<&[f64]> = idx.iter().map(|&i| self.texts[i].as_slice()).collect();
        (
            Matrix::from_rows(&img).expect("uniform feature dims"),
            Matrix::from_rows(&txt).expect("uniform text dims"),
        )
    }
}

/// Loss and parameter gradients for one batch.
fn batch_loss_and_grads(params: &EncoderParams, images: &Matrix, texts: &Matrix) -> Result<(f64, EncoderParams)> {
    let (img_raw, img_cache) = params.image_head.forward(images)?;
    let (txt_raw, txt_cache) = params.text_head.forward(texts)?;
    let (u, u_norms) = align::normalize_rows(&img_raw)?;
    let (v, v_norms) = align::normalize_rows(&txt_raw)?;
    let out = align::clip_loss_with_grads(&u, &v, params.log_inv_tau)?;

    let back = |unit: &Matrix, norms: &[f64], grad: &Matrix| {
        let mut g = Matrix::zeros(unit.rows(), unit.cols());
        for (i, &norm) in norms.iter().enumerate() {
            g.row_mut(i)
                .copy_from_slice(&align::normalize_backward(unit.row(i), norm, grad.row(i)));
        }
        g
    };
    let grad_img = back(&u, &u_norms, &out.grad_u);
    let grad_txt = back(&v, &v_norms, &out.grad_v);
    let grads = EncoderParams {
        image_head: params.image_head.backward(&img_cache, &grad_img),
        text_head: params.text_head.backward(&txt_cache, &grad_txt),
        log_inv_tau: out.grad_log_inv_tau,
    };
    Ok((out.loss_total, grads))
}

fn batch_loss(params: &EncoderParams, images: &Matrix, texts: &Matrix) -> Result<f64> {
    let (img_raw, _) = params.image_head.forward(images)?;
    let (txt_raw, _) = params.text_head.forward(texts)?;
    let (u, _) = align::normalize_rows(&img_raw)?;
    let (v, _) = align::normalize_rows(&txt_raw)?;
    Ok(align::clip_loss_with_grads(&u, &v, params.log_inv_tau)?.loss_total)
}

/// Contrastive loss over `pairs` in their given order, in chunks of
/// `batch_size`; chunks shorter than 2 are skipped. Chunk losses are
/// weighted by chunk length.
pub fn evaluation_loss(
    params: &EncoderParams,
    pairs: &[ImageTextPair],
    features: &FeatureTable,
    featurizer: &TextFeaturizerConfig,
    batch_size: usize,
) -> Result<f64> {
    let tensors = PairTensors::build(pairs, features, featurizer)?;
    evaluation_loss_inner(params, &tensors, batch_size)
}

fn evaluation_loss_inner(params: &EncoderParams, tensors: &PairTensors, batch_size: usize) -> Result<f64> {
    let n = tensors.images.len();
    let idx: Vec<usize> = (0..n).collect();
    let (mut total, mut weight) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(2)) {
        if chunk.len() < 2 {
            continue;
        }
        let (x, t) = tensors.gather(chunk);
        total += batch_loss(params, &x, &t)? * chunk.len() as f64;
        weight += chunk.len();
    }
    if weight == 0 {
        return Err(TrainError::NoValidationPairs(n));
    }
    Ok(total / weight as f64)
}

/// Train one seed. The returned checkpoint is the epoch with the lowest
/// validation loss (epoch 0 = initial parameters); later epochs replace it
/// only on strict improvement.
pub fn train_run(
    train_pairs: &[ImageTextPair],
    val_pairs: &[ImageTextPair],
    features: &FeatureTable,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainRun> {
    config.validate()?;
    if train_pairs.len() < 2 {
        return Err(TrainError::TooFewPairs(train_pairs.len()));
    }
    if val_pairs.len() < 2 {
        return Err(TrainError::NoValidationPairs(val_pairs.len()));
    }
    let featurizer = config.featurizer()?;
    let train = PairTensors::build(train_pairs, features, &featurizer)?;
    let val = PairTensors::build(val_pairs, features, &featurizer)?;
    let image_dim = train.images[0].len();
    if let Some(bad) = train.images.iter().chain(&val.images).find(|f| f.len() != image_dim) {
        return Err(TrainError::InvalidConfig(format!(
            "feature dims differ: {} vs {image_dim}",
            bad.len()
        )));
    }

    let mut params = init_params(seed, config.dims(image_dim))?;
    let batch = config.batch_size.min(train_pairs.len());
    let steps_per_epoch = train_pairs.len() / batch;
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = SplitMix64::derive(seed ^ config.shuffle_seed, SHUFFLE_SALT);
    let mut adam = AdamState::new(params.param_count());
    let mut flat = params.to_flat();

    let initial_val_loss = evaluation_loss_inner(&params, &val, config.batch_size)?;
    let mut best = Checkpoint {
        params: params.clone(),
        epoch: 0,
        val_loss: initial_val_loss,
        seed,
        config: config.clone(),
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks_exact(batch) {
            let (x, t) = train.gather(chunk);
            let (loss, grads) = batch_loss_and_grads(&params, &x, &t)?;
            epoch_loss += loss;
            let lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min);
            adam.update(&mut flat, &grads.to_flat(), lr, &config.adam)?;
            let last = flat.len() - 1;
            flat[last] = clamp_log_inv_tau(flat[last]);
            params.assign_flat(&flat)?;
            step += 1;
        }
        if !params.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        let val_loss = evaluation_loss_inner(&params, &val, config.batch_size)?;
        let improved = val_loss < best.val_loss;
        if improved {
            best = Checkpoint {
                params: params.clone(),
                epoch: epoch as u32,
                val_loss,
                seed,
                config: config.clone(),
            };
        }
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss,
            temperature: params.temperature(),
            improved,
        });
    }

    Ok(TrainRun {
        seed,
        best,
        initial_val_loss,
        history,
        steps_per_epoch,
        final_params: params,
    })
}

/// One run per configured seed over fixed pair lists. Seeds run in
/// parallel; results are in seed order and identical to sequential runs.
pub fn train(
    train_pairs: &[ImageTextPair],
    val_pairs: &[ImageTextPair],
    features: &FeatureTable,
    config: &TrainConfig,
) -> Result<Vec<TrainRun>> {
    config.validate()?;
    config
        .seeds
        .par_iter()
        .map(|&seed| train_run(train_pairs, val_pairs, features, config, seed))
        .collect()
}

/// Train/validation pairs for one seed. Explicit validation records in the
/// manifest are used as-is; otherwise a stratified split is drawn with the
/// seed, so every seed sees a different partition. Test records are ignored.
pub fn pairs_for_seed(
    manifest: &DatasetManifest,
    pools: &CaptionPools,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Vec<ImageTextPair>, Vec<ImageTextPair>)> {
    let has_val = manifest.records.iter().any(|r| r.split == Split::Validation);
    let (train, val) = if has_val {
        (manifest.filter_split(Split::Train), manifest.filter_split(Split::Validation))
    } else {
        let usable = manifest.with_records(
            manifest
                .records
                .iter()
                .filter(|r| r.split != Split::Test)
                .cloned()
                .collect(),
        );
        split_train_val(&usable, config.train_fraction, seed)?
    };
    Ok((
        build_pairs(&train.records, pools, config.mode)?,
        build_pairs(&val.records, pools, config.mode)?,
    ))
}

/// Full multi-seed protocol on a manifest: per-seed split, pairing, training.
pub fn train_manifest(
    manifest: &DatasetManifest,
    pools: &CaptionPools,
    config: &TrainConfig,
) -> Result<Vec<TrainRun>> {
    config.validate()?;
    let features = feature_table(manifest);
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let (train_pairs, val_pairs) = pairs_for_seed(manifest, pools, config, seed)?;
            train_run(&train_pairs, &val_pairs, &features, config, seed)
        })
        .collect()
}
