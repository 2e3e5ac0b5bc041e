//! Text featurization and the trainable projection heads of the dual encoder.
//!
//! Captions are turned into hashed bag-of-words vectors (FNV-1a 64 over the
//! UTF-8 bytes of each lowercased alphanumeric token, modulo the bucket
//! count, then L2-normalized). Images arrive as precomputed feature vectors.
//! Each modality then passes through a small projection head.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{self, AlignError, UnitEmbedding, INIT_TEMPERATURE};
use crate::matrix::Matrix;
use crate::rng::SplitMix64;

pub const DEFAULT_BUCKET_COUNT: usize = 512;
pub const MIN_BUCKET_COUNT: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("text contains no alphanumeric tokens")]
    EmptyText,
    #[error("input dimension {got} does not match head input dimension {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Align(#[from] AlignError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercase and split on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextFeaturizerConfig {
    bucket_count: usize,
}

impl TextFeaturizerConfig {
    pub fn new(bucket_count: usize) -> Result<Self> {
        if bucket_count < MIN_BUCKET_COUNT {
            return Err(EncoderError::InvalidConfig(format!(
                "bucket count {bucket_count} is below {MIN_BUCKET_COUNT}"
            )));
        }
        Ok(Self { bucket_count })
    }

    pub fn bucket_count(&self) -> usize {
        self.bucket_count
    }

    pub fn bucket_of(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.bucket_count as u64) as usize
    }
}

impl Default for TextFeaturizerConfig {
    fn default() -> Self {
        Self {
            bucket_count: DEFAULT_BUCKET_COUNT,
        }
    }
}

/// Hashed, L2-normalized token-count vector of length `bucket_count`.
pub fn featurize_text(caption: &str, cfg: &TextFeaturizerConfig) -> Result<Vec<f64>> {
    let tokens = tokenize(caption);
    if tokens.is_empty() {
        return Err(EncoderError::EmptyText);
    }
    let mut counts = vec![0.0; cfg.bucket_count];
    for t in &tokens {
        counts[cfg.bucket_of(t)] += 1.0;
    }
    Ok(align::normalize(&counts)?.into_inner())
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    fn xavier(out_dim: usize, in_dim: usize, rng: &mut SplitMix64) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| (2.0 * rng.next_f64() - 1.0) * limit)
            .collect();
        Self {
            weight: Matrix::from_vec(out_dim, in_dim, data),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let nz: Vec<(usize, f64)> = x
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, v)| v != 0.0)
            .collect();
        (0..self.out_dim())
            .map(|i| {
                let row = self.weight.row(i);
                self.bias[i] + nz.iter().map(|&(j, v)| row[j] * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulate `∂L/∂W += g xᵀ` and `∂L/∂b += g`.
    fn accumulate(&mut self, x: &[f64], g: &[f64]) {
        let nz: Vec<(usize, f64)> = x
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, v)| v != 0.0)
            .collect();
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            let row = self.weight.row_mut(i);
            for &(j, v) in &nz {
                row[j] += gi * v;
            }
            self.bias[i] += gi;
        }
    }

    fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(&self.bias);
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        let w = self.weight.as_slice().len();
        self.weight.as_mut_slice().copy_from_slice(&src[..w]);
        let b = self.bias.len();
        self.bias.copy_from_slice(&src[w..w + b]);
        w + b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// `W x + b`
    Identity,
    /// `W2 tanh(W1 x + b1) + b2`
    Hidden,
}

impl HeadMode {
    pub fn code(self) -> u8 {
        match self {
            HeadMode::Identity => 0,
            HeadMode::Hidden => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HeadMode::Identity),
            1 => Some(HeadMode::Hidden),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProjectionHead {
    Identity(Dense),
    Hidden { hidden: Dense, output: Dense },
}

/// Intermediate activations kept for the backward pass.
pub struct HeadCache {
    inputs: Matrix,
    hidden: Option<Matrix>,
}

impl ProjectionHead {
    pub fn zeros(mode: HeadMode, in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        match mode {
            HeadMode::Identity => ProjectionHead::Identity(Dense::zeros(out_dim, in_dim)),
            HeadMode::Hidden => ProjectionHead::Hidden {
                hidden: Dense::zeros(hidden_dim, in_dim),
                output: Dense::zeros(out_dim, hidden_dim),
            },
        }
    }

    pub fn mode(&self) -> HeadMode {
        match self {
            ProjectionHead::Identity(_) => HeadMode::Identity,
            ProjectionHead::Hidden { .. } => HeadMode::Hidden,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            ProjectionHead::Identity(d) => d.in_dim(),
            ProjectionHead::Hidden { hidden, .. } => hidden.in_dim(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            ProjectionHead::Identity(_) => 0,
            ProjectionHead::Hidden { hidden, .. } => hidden.out_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            ProjectionHead::Identity(d) => d.out_dim(),
            ProjectionHead::Hidden { output, .. } => output.out_dim(),
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut flat = Vec::new();
        self.write_flat(&mut flat);
        flat.iter().all(|v| v.is_finite())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(EncoderError::ShapeMismatch {
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        Ok(match self {
            ProjectionHead::Identity(d) => d.apply(x),
            ProjectionHead::Hidden { hidden, output } => {
                let h: Vec<f64> = hidden.apply(x).into_iter().map(f64::tanh).collect();
                output.apply(&h)
            }
        })
    }

    /// Encode every row of `inputs`, keeping what the backward pass needs.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, HeadCache)> {
        if inputs.cols() != self.in_dim() {
            return Err(EncoderError::ShapeMismatch {
                expected: self.in_dim(),
                got: inputs.cols(),
            });
        }
        let n = inputs.rows();
        let mut out = Matrix::zeros(n, self.out_dim());
        let hidden = match self {
            ProjectionHead::Identity(d) => {
                for i in 0..n {
                    out.row_mut(i).copy_from_slice(&d.apply(inputs.row(i)));
                }
                None
            }
            ProjectionHead::Hidden { hidden, output } => {
                let mut h = Matrix::zeros(n, hidden.out_dim());
                for i in 0..n {
                    let a: Vec<f64> = hidden.apply(inputs.row(i)).into_iter().map(f64::tanh).collect();
                    out.row_mut(i).copy_from_slice(&output.apply(&a));
                    h.row_mut(i).copy_from_slice(&a);
                }
                Some(h)
            }
        };
        Ok((
            out,
            HeadCache {
                inputs: inputs.clone(),
                hidden,
            },
        ))
    }

    /// Parameter gradients given `∂L/∂output` for each row.
    pub fn backward(&self, cache: &HeadCache, grad_out: &Matrix) -> ProjectionHead {
        let mut grads = ProjectionHead::zeros(self.mode(), self.in_dim(), self.hidden_dim(), self.out_dim());
        match (self, &mut grads) {
            (ProjectionHead::Identity(_), ProjectionHead::Identity(g)) => {
                for i in 0..grad_out.rows() {
                    g.accumulate(cache.inputs.row(i), grad_out.row(i));
                }
            }
            (
                ProjectionHead::Hidden { output, .. },
                ProjectionHead::Hidden {
                    hidden: gh,
                    output: go,
                },
            ) => {
                let h = cache.hidden.as_ref().expect("hidden activations cached");
                for i in 0..grad_out.rows() {
                    let g = grad_out.row(i);
                    let a = h.row(i);
                    go.accumulate(a, g);
                    let grad_a = output.weight.transpose_mul_vec(g);
                    let grad_z: Vec<f64> = grad_a
                        .iter()
                        .zip(a)
                        .map(|(ga, ai)| ga * (1.0 - ai * ai))
                        .collect();
                    gh.accumulate(cache.inputs.row(i), &grad_z);
                }
            }
            _ => unreachable!("gradient head mirrors parameter head"),
        }
        grads
    }

    pub fn param_count(&self) -> usize {
        match self {
            ProjectionHead::Identity(d) => d.param_count(),
            ProjectionHead::Hidden { hidden, output } => hidden.param_count() + output.param_count(),
        }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        match self {
            ProjectionHead::Identity(d) => d.write_flat(out),
            ProjectionHead::Hidden { hidden, output } => {
                hidden.write_flat(out);
                output.write_flat(out);
            }
        }
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        match self {
            ProjectionHead::Identity(d) => d.read_flat(src),
            ProjectionHead::Hidden { hidden, output } => {
                let used = hidden.read_flat(src);
                used + output.read_flat(&src[used..])
            }
        }
    }
}

/// Shapes of both projection heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub image_dim: usize,
    pub text_dim: usize,
    pub embed_dim: usize,
    /// Width of the tanh layer; ignored for [`HeadMode::Identity`].
    pub hidden_dim: usize,
    pub mode: HeadMode,
}

impl EncoderDims {
    /// Hidden width defaults to the embedding dimension.
    pub fn new(image_dim: usize, text_dim: usize, embed_dim: usize, mode: HeadMode) -> Self {
        Self {
            image_dim,
            text_dim,
            embed_dim,
            hidden_dim: embed_dim,
            mode,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_dim == 0 || self.text_dim == 0 || self.embed_dim == 0 {
            return Err(EncoderError::InvalidConfig("dimensions must be positive".into()));
        }
        if self.mode == HeadMode::Hidden && self.hidden_dim == 0 {
            return Err(EncoderError::InvalidConfig("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable state of the dual encoder: two heads and `ln(1/τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub image_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub log_inv_tau: f64,
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            image_head: ProjectionHead::zeros(
                self.image_head.mode(),
                self.image_head.in_dim(),
                self.image_head.hidden_dim(),
                self.image_head.out_dim(),
            ),
            text_head: ProjectionHead::zeros(
                self.text_head.mode(),
                self.text_head.in_dim(),
                self.text_head.hidden_dim(),
                self.text_head.out_dim(),
            ),
            log_inv_tau: 0.0,
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            image_dim: self.image_head.in_dim(),
            text_dim: self.text_head.in_dim(),
            embed_dim: self.image_head.out_dim(),
            hidden_dim: self.image_head.hidden_dim(),
            mode: self.image_head.mode(),
        }
    }

    pub fn temperature(&self) -> f64 {
        (-self.log_inv_tau).exp()
    }

    pub fn param_count(&self) -> usize {
        self.image_head.param_count() + self.text_head.param_count() + 1
    }

    /// All parameters in declared order: image head, text head, `ln(1/τ)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.image_head.write_flat(&mut out);
        self.text_head.write_flat(&mut out);
        out.push(self.log_inv_tau);
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat).
    pub fn assign_flat(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(EncoderError::ShapeMismatch {
                expected: self.param_count(),
                got: src.len(),
            });
        }
        let used = self.image_head.read_flat(src);
        let used = used + self.text_head.read_flat(&src[used..]);
        self.log_inv_tau = src[used];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Xavier-uniform weights from one SplitMix64 stream, zero biases,
/// `τ = 0.07`. Draw order follows the flat parameter order.
pub fn init_params(seed: u64, dims: EncoderDims) -> Result<EncoderParams> {
    dims.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut head = |in_dim: usize| match dims.mode {
        HeadMode::Identity => ProjectionHead::Identity(Dense::xavier(dims.embed_dim, in_dim, &mut rng)),
        HeadMode::Hidden => {
            let hidden = Dense::xavier(dims.hidden_dim, in_dim, &mut rng);
            let output = Dense::xavier(dims.embed_dim, dims.hidden_dim, &mut rng);
            ProjectionHead::Hidden { hidden, output }
        }
    };
    let image_head = head(dims.image_dim);
    let text_head = head(dims.text_dim);
    Ok(EncoderParams {
        image_head,
        text_head,
        log_inv_tau: (1.0 / INIT_TEMPERATURE).ln(),
    })
}

/// A trained model ready for inference: heads, temperature and the text
/// featurizer configuration they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub params: EncoderParams,
    pub featurizer: TextFeaturizerConfig,
}

impl DualEncoder {
    pub fn new(params: EncoderParams, featurizer: TextFeaturizerConfig) -> Result<Self> {
        if params.text_head.in_dim() != featurizer.bucket_count() {
            return Err(EncoderError::ShapeMismatch {
                expected: params.text_head.in_dim(),
                got: featurizer.bucket_count(),
            });
        }
        Ok(Self { params, featurizer })
    }

    pub fn embed_dim(&self) -> usize {
        self.params.image_head.out_dim()
    }

    pub fn temperature(&self) -> f64 {
        self.params.temperature()
    }

    pub fn embed_image(&self, features: &[f64]) -> Result<UnitEmbedding> {
        Ok(align::normalize(&self.params.image_head.encode(features)?)?)
    }

    pub fn embed_text(&self, text: &str) -> Result<UnitEmbedding> {
        let x = featurize_text(text, &self.featurizer)?;
        Ok(align::normalize(&self.params.text_head.encode(&x)?)?)
    }
}
