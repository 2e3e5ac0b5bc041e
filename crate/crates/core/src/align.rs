//! Embedding normalization, the temperature-scaled cross-modal similarity
//! matrix, and the symmetric image/text cross-entropy objective.
//!
//! Gradients are closed form. For logits `S = exp(s) · U Vᵀ` with
//! `s = ln(1/τ)`, the derivative of the averaged loss with respect to `S` is
//!
//! ```text
//! G_ij = ((softmax_row(S)_ij − δ_ij) + (softmax_col(S)_ij − δ_ij)) / (2N)
//! ```
//!
//! from which `∂L/∂U = exp(s)·G V`, `∂L/∂V = exp(s)·Gᵀ U` and
//! `∂L/∂s = Σ_ij G_ij S_ij`.

use thiserror::Error;

use crate::matrix::{dot, norm, Matrix};

/// Norms below this are treated as a degenerate encoder output.
pub const MIN_NORM: f64 = 1e-12;

/// Temperature initialisation used by CLIP-style training.
pub const INIT_TEMPERATURE: f64 = 0.07;

/// Allowed temperature range; `ln(1/τ)` is clamped into the matching interval.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.01, 100.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("embedding norm {norm:e} is below {MIN_NORM:e}")]
    ZeroNorm { norm: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidEpsilon(f64),
}

pub type Result<T> = std::result::Result<T, AlignError>;

/// A vector with Euclidean norm 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl AsRef<[f64]> for UnitEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn normalize(e: &[f64]) -> Result<UnitEmbedding> {
    if e.iter().any(|v| !v.is_finite()) {
        return Err(AlignError::NonFinite("embedding"));
    }
    let n = norm(e);
    if n < MIN_NORM {
        return Err(AlignError::ZeroNorm { norm: n });
    }
    Ok(UnitEmbedding(e.iter().map(|v| v / n).collect()))
}

/// Normalize every row; returns the unit rows and the original norms
/// (needed to back-propagate through the normalization).
pub fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let unit = normalize(m.row(i))?;
        norms.push(norm(m.row(i)));
        out.row_mut(i).copy_from_slice(unit.as_slice());
    }
    Ok((out, norms))
}

/// Gradient through `u = e/‖e‖`: `∂L/∂e = (g − u (u·g)) / ‖e‖`.
pub fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, grad_unit);
    unit.iter()
        .zip(grad_unit)
        .map(|(u, g)| (g - u * proj) / norm)
        .collect()
}

pub fn clamp_log_inv_tau(s: f64) -> f64 {
    let (lo, hi) = TEMPERATURE_RANGE;
    s.clamp((1.0 / hi).ln(), (1.0 / lo).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub entries: Matrix,
    pub temperature: f64,
}

fn check_batch_pair(u: &Matrix, v: &Matrix) -> Result<()> {
    if u.rows() != v.rows() {
        return Err(AlignError::ShapeMismatch(format!(
            "batch sizes {} and {}",
            u.rows(),
            v.rows()
        )));
    }
    if u.cols() != v.cols() {
        return Err(AlignError::ShapeMismatch(format!(
            "embedding dims {} and {}",
            u.cols(),
            v.cols()
        )));
    }
    if u.rows() == 0 || u.cols() == 0 {
        return Err(AlignError::EmptyBatch);
    }
    Ok(())
}

/// `S[i][j] = (u_i · v_j) / τ` over unit-norm rows.
pub fn similarity_matrix(u: &Matrix, v: &Matrix, tau: f64) -> Result<SimilarityMatrix> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(AlignError::InvalidTemperature(tau));
    }
    check_batch_pair(u, v)?;
    let mut entries = u.matmul_transposed(v);
    entries.scale(1.0 / tau);
    Ok(SimilarityMatrix {
        entries,
        temperature: tau,
    })
}

/// Directional losses and `∂L/∂S` for a square logit matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLoss {
    pub loss_i2t: f64,
    pub loss_t2i: f64,
    pub loss_total: f64,
    pub grad_logits: Matrix,
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Symmetric cross-entropy against the diagonal of `logits`.
pub fn contrastive_loss(logits: &Matrix) -> Result<LogitLoss> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if rows != cols {
        return Err(AlignError::NonSquare { rows, cols });
    }
    if rows == 0 {
        return Err(AlignError::EmptyBatch);
    }
    if !logits.is_finite() {
        return Err(AlignError::NonFinite("similarity matrix"));
    }
    let n = rows;
    let row_lse: Vec<f64> = (0..n)
        .map(|i| log_sum_exp((0..n).map(|j| logits[(i, j)])))
        .collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| log_sum_exp((0..n).map(|i| logits[(i, j)])))
        .collect();

    let inv_n = 1.0 / n as f64;
    let loss_i2t = inv_n * (0..n).map(|i| row_lse[i] - logits[(i, i)]).sum::<f64>();
    let loss_t2i = inv_n * (0..n).map(|i| col_lse[i] - logits[(i, i)]).sum::<f64>();

    let mut grad = Matrix::zeros(n, n);
    let half_inv_n = 0.5 * inv_n;
    for i in 0..n {
        for j in 0..n {
            let s = logits[(i, j)];
            let p_row = (s - row_lse[i]).exp();
            let p_col = (s - col_lse[j]).exp();
            let target = if i == j { 2.0 } else { 0.0 };
            grad[(i, j)] = half_inv_n * (p_row + p_col - target);
        }
    }

    Ok(LogitLoss {
        loss_i2t,
        loss_t2i,
        loss_total: 0.5 * (loss_i2t + loss_t2i),
        grad_logits: grad,
    })
}

pub fn clip_loss(s: &SimilarityMatrix) -> Result<LogitLoss> {
    contrastive_loss(&s.entries)
}

/// Loss plus gradients with respect to both embedding batches and `ln(1/τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss_i2t: f64,
    pub loss_t2i: f64,
    pub loss_total: f64,
    pub grad_u: Matrix,
    pub grad_v: Matrix,
    pub grad_log_inv_tau: f64,
}

/// Evaluate the objective on unit image rows `u` and text rows `v`.
pub fn clip_loss_with_grads(u: &Matrix, v: &Matrix, log_inv_tau: f64) -> Result<LossOutput> {
    check_batch_pair(u, v)?;
    if !log_inv_tau.is_finite() {
        return Err(AlignError::NonFinite("log inverse temperature"));
    }
    let scale = log_inv_tau.exp();
    let mut logits = u.matmul_transposed(v);
    logits.scale(scale);
    let lo = contrastive_loss(&logits)?;

    let mut grad_u = lo.grad_logits.matmul(v);
    grad_u.scale(scale);
    let mut grad_v = lo.grad_logits.transpose().matmul(u);
    grad_v.scale(scale);
    let grad_log_inv_tau = dot(lo.grad_logits.as_slice(), logits.as_slice());

    let out = LossOutput {
        loss_i2t: lo.loss_i2t,
        loss_t2i: lo.loss_t2i,
        loss_total: lo.loss_total,
        grad_u,
        grad_v,
        grad_log_inv_tau,
    };
    if !(out.grad_u.is_finite() && out.grad_v.is_finite() && grad_log_inv_tau.is_finite()) {
        return Err(AlignError::NonFinite("gradient"));
    }
    Ok(out)
}

/// Worst relative discrepancy between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub max_rel_error_u: f64,
    pub max_rel_error_v: f64,
    pub rel_error_log_inv_tau: f64,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// Compare [`clip_loss_with_grads`] against central finite differences over
/// every entry of `u`, `v` and `log_inv_tau`.
pub fn check_gradients(
    u: &Matrix,
    v: &Matrix,
    log_inv_tau: f64,
    epsilon: f64,
) -> Result<GradientCheck> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(AlignError::InvalidEpsilon(epsilon));
    }
    let analytic = clip_loss_with_grads(u, v, log_inv_tau)?;
    let loss = |u: &Matrix, v: &Matrix, s: f64| -> Result<f64> {
        Ok(clip_loss_with_grads(u, v, s)?.loss_total)
    };

    let mut max_u = 0.0f64;
    let mut probe = u.clone();
    for k in 0..u.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + epsilon;
        let plus = loss(&probe, v, log_inv_tau)?;
        probe.as_mut_slice()[k] = orig - epsilon;
        let minus = loss(&probe, v, log_inv_tau)?;
        probe.as_mut_slice()[k] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        max_u = max_u.max(rel_error(analytic.grad_u.as_slice()[k], numeric));
    }

    let mut max_v = 0.0f64;
    let mut probe = v.clone();
    for k in 0..v.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + epsilon;
        let plus = loss(u, &probe, log_inv_tau)?;
        probe.as_mut_slice()[k] = orig - epsilon;
        let minus = loss(u, &probe, log_inv_tau)?;
        probe.as_mut_slice()[k] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        max_v = max_v.max(rel_error(analytic.grad_v.as_slice()[k], numeric));
    }

    let numeric_s = (loss(u, v, log_inv_tau + epsilon)? - loss(u, v, log_inv_tau - epsilon)?)
        / (2.0 * epsilon);
    let err_s = rel_error(analytic.grad_log_inv_tau, numeric_s);

    Ok(GradientCheck {
        max_rel_error: max_u.max(max_v).max(err_s),
        max_rel_error_u: max_u,
        max_rel_error_v: max_v,
        rel_error_log_inv_tau: err_s,
    })
}
