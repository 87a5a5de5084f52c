//! Supervision losses: focal loss on the dual-softmax probabilities and an
//! ℓ2 loss on fine locations, with the analytic gradient of the coarse term
//! with respect to the similarity matrix.

use nalgebra::DMatrix;

use super::matching::{dual_softmax, LocalizeError};
use crate::geometry::Pixel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    /// Probabilities are clamped to `[eps, 1 − eps]`.
    pub eps: f64,
    /// Sampled negatives per positive.
    pub negative_ratio: usize,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0, eps: 1e-6, negative_ratio: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coarse: f64,
    pub fine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coarse: 1.0, fine: 1.0 }
    }
}

/// Entries entering the focal loss: every positive, then negatives from
/// rows or columns holding a positive in row-major order, capped at
/// `negative_ratio` per positive.
pub fn focal_entries(gt: &DMatrix<f64>, negative_ratio: usize) -> Vec<(usize, usize, bool)> {
    let (n, m) = gt.shape();
    let pos_row: Vec<bool> = (0..n).map(|j| gt.row(j).iter().any(|&x| x > 0.5)).collect();
    let pos_col: Vec<bool> = (0..m).map(|q| gt.column(q).iter().any(|&x| x > 0.5)).collect();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for j in 0..n {
        for q in 0..m {
            if gt[(j, q)] > 0.5 {
                positives.push((j, q, true));
            } else if pos_row[j] || pos_col[q] {
                negatives.push((j, q, false));
            }
        }
    }
    negatives.truncate(positives.len() * negative_ratio);
    positives.extend(negatives);
    positives
}

fn check_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(), LocalizeError> {
    if a.shape() != b.shape() {
        return Err(LocalizeError::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Focal loss and its gradient with respect to `p`.
pub fn focal_loss_with_grad(
    p: &DMatrix<f64>,
    gt: &DMatrix<f64>,
    params: &FocalParams,
) -> Result<(f64, DMatrix<f64>), LocalizeError> {
    check_shape(p, gt)?;
    let entries = focal_entries(gt, params.negative_ratio);
    let mut grad = DMatrix::zeros(p.nrows(), p.ncols());
    if entries.is_empty() {
        return Ok((0.0, grad));
    }
    let (a, g) = (params.alpha, params.gamma);
    let scale = 1.0 / entries.len() as f64;
    let mut loss = 0.0;
    for (j, q, positive) in entries {
        let raw = p[(j, q)];
        let x = raw.clamp(params.eps, 1.0 - params.eps);
        let inside = raw == x;
        let (l, dl) = if positive {
            let l = -a * (1.0 - x).powf(g) * x.ln();
            let dl = a * (g * (1.0 - x).powf(g - 1.0) * x.ln() - (1.0 - x).powf(g) / x);
            (l, dl)
        } else {
            let l = -a * x.powf(g) * (1.0 - x).ln();
            let dl = -a * (g * x.powf(g - 1.0) * (1.0 - x).ln() - x.powf(g) / (1.0 - x));
            (l, dl)
        };
        loss += l * scale;
        if inside {
            grad[(j, q)] = dl * scale;
        }
    }
    Ok((loss, grad))
}

pub fn focal_loss(p: &DMatrix<f64>, gt: &DMatrix<f64>, params: &FocalParams) -> Result<f64, LocalizeError> {
    focal_loss_with_grad(p, gt, params).map(|(l, _)| l)
}

/// Back-propagates `G = ∂L/∂P` through `P = softmax_row(S) ⊙ softmax_col(S)`:
/// with `H = G ⊙ P`, `∂L/∂S = 2H − A ⊙ rowsum(H) − B ⊙ colsum(H)`.
pub fn dual_softmax_backward(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    p: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> DMatrix<f64> {
    let h = g.component_mul(p);
    let rows = h.column_sum();
    let cols = h.row_sum();
    DMatrix::from_fn(h.nrows(), h.ncols(), |j, q| {
        2.0 * h[(j, q)] - a[(j, q)] * rows[j] - b[(j, q)] * cols[q]
    })
}

/// Coarse loss of a similarity matrix and its gradient with respect to it.
pub fn coarse_loss_with_grad(
    s: &DMatrix<f64>,
    gt: &DMatrix<f64>,
    params: &FocalParams,
) -> Result<(f64, DMatrix<f64>), LocalizeError> {
    check_shape(s, gt)?;
    let (a, b, p) = dual_softmax(s);
    let (loss, g) = focal_loss_with_grad(&p, gt, params)?;
    Ok((loss, dual_softmax_backward(&a, &b, &p, &g)))
}

/// Mean squared pixel distance between matched predictions and targets.
pub fn l2_fine_loss(predicted: &[Pixel], target: &[Pixel]) -> Result<f64, LocalizeError> {
    if predicted.len() != target.len() {
        return Err(LocalizeError::Dimension(format!(
            "{} predictions vs {} targets",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = predicted
        .iter()
        .zip(target)
        .map(|(a, b)| (a.u - b.u).powi(2) + (a.v - b.v).powi(2))
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Weighted total loss and its gradient with respect to `s`; the fine term
/// does not depend on `s`.
pub fn total_loss_with_grad(
    s: &DMatrix<f64>,
    gt: &DMatrix<f64>,
    predicted: &[Pixel],
    target: &[Pixel],
    params: &FocalParams,
    weights: &LossWeights,
) -> Result<(f64, DMatrix<f64>), LocalizeError> {
    let (coarse, grad) = coarse_loss_with_grad(s, gt, params)?;
    let fine = l2_fine_loss(predicted, target)?;
    Ok((weights.coarse * coarse + weights.fine * fine, grad * weights.coarse))
}
