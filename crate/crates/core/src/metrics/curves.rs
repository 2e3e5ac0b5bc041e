use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};

pub const DEFAULT_GRID_SIZE: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Roc,
    Pr,
}

/// ROC points are `(FPR, TPR)`; PR points are `(recall, precision)`.
/// `thresholds[i]` is the score cut producing `points[i]`; the leading
/// anchor point uses `+∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub kind: CurveKind,
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

/// Cumulative (threshold, tp, fp) after each block of tied scores, highest first.
fn sweep(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, u64, u64)>> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (pos, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_block = order
            .get(pos + 1)
            .is_none_or(|&next| scores[next] != scores[i]);
        if last_of_block {
            out.push((scores[i], tp, fp));
        }
    }
    Ok(out)
}

/// ROC curve over every distinct score and its trapezoidal area.
/// Tied scores form one step, which gives ties half credit.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<(Curve, f64)> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(MetricsError::SingleClass);
    }
    let steps = sweep(scores, labels)?;
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let mut area = 0.0;
    for (t, tp, fp) in steps {
        let (x, y) = (fp as f64 / neg, tp as f64 / pos);
        let (px, py) = *points.last().unwrap();
        area += (x - px) * (y + py) / 2.0;
        points.push((x, y));
        thresholds.push(t);
    }
    Ok((
        Curve {
            kind: CurveKind::Roc,
            points,
            thresholds,
        },
        area,
    ))
}

/// Precision-recall curve and its step-wise area `Σ (R_k − R_{k−1}) P_k`.
/// The curve starts at the anchor `(0, 1)`.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<(Curve, f64)> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    if pos == 0.0 {
        return Err(MetricsError::NoPositives);
    }
    let steps = sweep(scores, labels)?;
    let mut points = vec![(0.0, 1.0)];
    let mut thresholds = vec![f64::INFINITY];
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (t, tp, fp) in steps {
        let recall = tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
        thresholds.push(t);
    }
    Ok((
        Curve {
            kind: CurveKind::Pr,
            points,
            thresholds,
        },
        area,
    ))
}

/// Several curves resampled on a shared uniform grid over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCurve {
    pub kind: CurveKind,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Piecewise-linear interpolation. At a repeated x (a vertical step) the
/// last point with that x wins; outside the covered range the end value holds.
fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let idx = points.partition_point(|p| p.0 <= x);
    if idx == 0 {
        return points[0].1;
    }
    let (x0, y0) = points[idx - 1];
    match points.get(idx) {
        None => y0,
        Some(&(x1, y1)) => {
            if x1 == x0 {
                y0
            } else {
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }
}

pub fn mean_curve(curves: &[Curve], grid_size: usize) -> Result<MeanCurve> {
    let first = curves.first().ok_or(MetricsError::EmptyInput)?;
    if curves.iter().any(|c| c.kind != first.kind) {
        return Err(MetricsError::KindMismatch);
    }
    if grid_size < 2 {
        return Err(MetricsError::InvalidInput("grid needs at least 2 points".into()));
    }
    if curves.iter().any(|c| c.points.is_empty()) {
        return Err(MetricsError::EmptyInput);
    }
    let x: Vec<f64> = (0..grid_size)
        .map(|i| i as f64 / (grid_size - 1) as f64)
        .collect();
    let n = curves.len() as f64;
    let (mut mean, mut lower, mut upper) = (Vec::new(), Vec::new(), Vec::new());
    for &g in &x {
        let ys: Vec<f64> = curves.iter().map(|c| interpolate(&c.points, g)).collect();
        mean.push(ys.iter().sum::<f64>() / n);
        lower.push(ys.iter().copied().fold(f64::INFINITY, f64::min));
        upper.push(ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(MeanCurve {
        kind: first.kind,
        x,
        mean,
        lower,
        upper,
    })
}
