//! Classification losses and their gradients with respect to the class
//! scores.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on cosine inputs to [`lmcl`].
pub const COSINE_SLACK: f64 = 1e-6;

/// Large margin cosine loss parameters: scale `s` and additive cosine margin `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmclConfig {
    pub s: f64,
    pub m: f64,
}

impl Default for LmclConfig {
    fn default() -> Self {
        LmclConfig { s: 30.0, m: 0.35 }
    }
}

impl LmclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!("lmcl scale s must be positive, got {}", self.s)));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::Config(format!("lmcl margin m must be in [0, 1), got {}", self.m)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean over the batch.
    pub value: f64,
    /// `n x C`, already divided by `n`.
    pub score_gradients: Array2<f64>,
}

fn check_labels(scores: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if scores.nrows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} score rows but {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= scores.ncols()) {
        return Err(Error::Contract(format!("label {y} out of range for {} classes", scores.ncols())));
    }
    Ok(())
}

/// Softmax of one row, shifted by its maximum.
pub fn softmax(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let p = softmax(row.view());
        row.iter_mut().zip(p).for_each(|(dst, v)| *dst = v);
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean cross-entropy of softmax(logits) against `labels`.
pub fn softmax_ce(logits: &Array2<f64>, labels: &[usize]) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    let n = labels.len();
    let mut grads = Array2::zeros(logits.raw_dim());
    if n == 0 {
        return Ok(LossOutput {
            value: 0.0,
            score_gradients: grads,
        });
    }
    let mut total = 0.0;
    for ((row, &y), mut g) in logits.rows().into_iter().zip(labels).zip(grads.rows_mut()) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        // (max - z_y) is exact when y holds the maximum
        total += sum.ln() + (max - row[y]);
        for (j, (gj, &z)) in g.iter_mut().zip(row.iter()).enumerate() {
            let p = (z - log_norm).exp();
            *gj = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok(LossOutput {
        value: total / n as f64,
        score_gradients: grads,
    })
}

/// Large margin cosine loss. The margin is subtracted from the true-class
/// cosine only, every cosine is scaled by `s`, and the result is softmax
/// cross-entropy; gradients are returned w.r.t. the cosines.
pub fn lmcl(cosines: &Array2<f64>, labels: &[usize], cfg: &LmclConfig) -> Result<LossOutput> {
    cfg.validate()?;
    check_labels(cosines, labels)?;
    if let Some(c) = cosines.iter().find(|c| !(c.abs() <= 1.0 + COSINE_SLACK)) {
        return Err(Error::Contract(format!("cosine {c} outside [-1, 1]")));
    }
    let mut logits = cosines.mapv(|c| cfg.s * c);
    for (i, &y) in labels.iter().enumerate() {
        logits[[i, y]] = cfg.s * (cosines[[i, y]] - cfg.m);
    }
    let mut out = softmax_ce(&logits, labels)?;
    out.score_gradients.mapv_inplace(|g| cfg.s * g);
    Ok(out)
}

/// One-vs-rest sigmoid cross-entropy, summed over classes and averaged
/// over the batch.
pub fn sigmoid_bce(logits: &Array2<f64>, labels: &[usize]) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    let n = labels.len();
    let mut grads = Array2::zeros(logits.raw_dim());
    if n == 0 {
        return Ok(LossOutput {
            value: 0.0,
            score_gradients: grads,
        });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..logits.ncols() {
            let z = logits[[i, j]];
            let target = if j == y { 1.0 } else { 0.0 };
            total += z.max(0.0) + (-z.abs()).exp().ln_1p() - target * z;
            grads[[i, j]] = (sigmoid(z) - target) / n as f64;
        }
    }
    Ok(LossOutput {
        value: total / n as f64,
        score_gradients: grads,
    })
}
