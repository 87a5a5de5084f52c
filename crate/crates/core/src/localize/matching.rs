//! Coarse 2D-3D matching by dual-softmax and fine matching by a windowed
//! expectation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use super::attention::{AttentionError, AttentionStack};
use super::encoding::{encode_pixels, encode_points};
use super::query::QueryFeatureMaps;
use crate::geometry::Pixel;
use crate::refine::PointCloudModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingConfig {
    /// Similarity temperature.
    pub tau: f64,
    /// Minimum dual-softmax probability of a coarse match.
    pub theta: f64,
    /// Fine window side, in fine-map pixels. Odd.
    pub window: usize,
    /// Temperature of the fine-window softmax.
    pub fine_temperature: f64,
    /// Relative weight of positional encodings.
    pub pe_weight: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            tau: 0.08,
            theta: 0.4,
            window: 5,
            fine_temperature: 0.08,
            pe_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseCorrespondence {
    pub point: usize,
    /// Flat index into the coarse grid.
    pub cell: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineCorrespondence {
    pub point: usize,
    pub location: Pixel,
    pub confidence: f64,
    /// The window was cut by the image border.
    pub truncated: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub coarse: Vec<CoarseCorrespondence>,
    pub fine: Vec<FineCorrespondence>,
}

/// Row softmax `A`, column softmax `B` and their product `P = A ⊙ B`.
pub fn dual_softmax(s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = s.shape();
    let mut a = s.clone();
    for mut r in a.row_iter_mut() {
        let mx = r.max();
        r.apply(|x| *x = (*x - mx).exp());
        let sum = r.sum();
        r.unscale_mut(sum);
    }
    let mut b = s.clone();
    for mut c in b.column_iter_mut() {
        let mx = c.max();
        c.apply(|x| *x = (*x - mx).exp());
        let sum = c.sum();
        c.unscale_mut(sum);
    }
    let p = if n == 0 || m == 0 { DMatrix::zeros(n, m) } else { a.component_mul(&b) };
    (a, b, p)
}

/// Mutual arg-max pairs of `p` with probability at least `theta`, by row.
pub fn mutual_nearest(p: &DMatrix<f64>, theta: f64) -> Vec<CoarseCorrespondence> {
    let (n, m) = p.shape();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let row_best: Vec<usize> = (0..n).map(|j| p.row(j).transpose().argmax().0).collect();
    let col_best: Vec<usize> = (0..m).map(|q| p.column(q).argmax().0).collect();
    row_best
        .iter()
        .enumerate()
        .filter(|&(j, &q)| col_best[q] == j && p[(j, q)] >= theta)
        .map(|(j, &q)| CoarseCorrespondence { point: j, cell: q, confidence: p[(j, q)] })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMatching {
    /// `S(j, q) = ⟨f_j, g_q⟩ / τ`, points by cells.
    pub scores: DMatrix<f64>,
    pub probabilities: DMatrix<f64>,
    pub matches: Vec<CoarseCorrespondence>,
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<(), LocalizeError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LocalizeError::NonFinite(what))
    }
}

/// Matches model points to coarse query cells.
///
/// With an empty stack, positional encoding is skipped as well and raw
/// descriptors are compared directly.
pub fn coarse_match_2d3d(
    model: &PointCloudModel,
    query: &QueryFeatureMaps,
    stack: &AttentionStack,
    config: &MatchingConfig,
) -> Result<CoarseMatching, LocalizeError> {
    let cells = query.coarse.len();
    if model.is_empty() {
        return Ok(CoarseMatching {
            scores: DMatrix::zeros(0, cells),
            probabilities: DMatrix::zeros(0, cells),
            matches: Vec::new(),
        });
    }
    if model.coarse_features.cols() != query.coarse.dim() {
        return Err(LocalizeError::Dimension(format!(
            "model coarse width {} vs query {}",
            model.coarse_features.cols(),
            query.coarse.dim()
        )));
    }
    let (f3, f2) = if stack.is_empty() {
        (model.coarse_features.to_dmatrix(), query.coarse.data.to_dmatrix())
    } else {
        let positions: Vec<(f64, f64)> = (0..cells)
            .map(|i| {
                let p = query.coarse.position_of(i);
                (p.u, p.v)
            })
            .collect();
        let f3 = encode_points(&model.coarse_features, &model.points, config.pe_weight);
        let f2 = encode_pixels(&query.coarse.data, &positions, query.coarse.stride as f64, config.pe_weight);
        stack.apply(&f3, &f2)?
    };
    check_finite(&f3, "3D coarse features")?;
    check_finite(&f2, "2D coarse features")?;
    let scores = (f3 * f2.transpose()) / config.tau;
    let (_, _, probabilities) = dual_softmax(&scores);
    let matches = mutual_nearest(&probabilities, config.theta);
    Ok(CoarseMatching { scores, probabilities, matches })
}

/// Fine-map indices of the `w×w` window centered on a coarse cell, clipped to
/// the map, and whether clipping occurred.
pub fn fine_window(query: &QueryFeatureMaps, cell: usize, window: usize) -> (Vec<usize>, bool) {
    let center = query.coarse.position_of(cell);
    let fine = &query.fine;
    let (cx, cy) = fine.nearest(center).expect("cell centers lie inside the fine map");
    let half = (window / 2) as i64;
    let mut out = Vec::with_capacity(window * window);
    let mut truncated = false;
    for dy in -half..=half {
        for dx in -half..=half {
            let (x, y) = (cx as i64 + dx, cy as i64 + dy);
            if x < 0 || y < 0 || x >= fine.cols as i64 || y >= fine.rows as i64 {
                truncated = true;
                continue;
            }
            out.push(fine.index(x as u32, y as u32));
        }
    }
    (out, truncated)
}

/// `center + Σ_i (x_i − center)·p_i`.
pub fn window_expectation(center: Pixel, positions: &[Pixel], probabilities: &[f64]) -> Pixel {
    let (mut du, mut dv) = (0.0, 0.0);
    for (x, p) in positions.iter().zip(probabilities) {
        du += (x.u - center.u) * p;
        dv += (x.v - center.v) * p;
    }
    Pixel::new(center.u + du, center.v + dv)
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let mx = logits.max();
    let e = logits.map(|x| (x - mx).exp());
    let s = e.sum();
    e / s
}

/// Refines each coarse match inside its fine window.
pub fn fine_match_2d3d(
    model: &PointCloudModel,
    query: &QueryFeatureMaps,
    coarse: &[CoarseCorrespondence],
    stack: &AttentionStack,
    config: &MatchingConfig,
) -> Result<Vec<FineCorrespondence>, LocalizeError> {
    if model.fine_features.cols() != query.fine.dim() && !model.is_empty() {
        return Err(LocalizeError::Dimension(format!(
            "model fine width {} vs query {}",
            model.fine_features.cols(),
            query.fine.dim()
        )));
    }
    coarse
        .par_iter()
        .map(|m| {
            let (idx, truncated) = fine_window(query, m.cell, config.window);
            let f3 = DMatrix::from_row_slice(1, query.fine.dim(), model.fine_features.row(m.point));
            let f2 = query.fine.data.select_rows(&idx).to_dmatrix();
            let (f3, f2) = stack.apply(&f3, &f2)?;
            let logits = (&f2 * f3.row(0).transpose()) / config.fine_temperature;
            if !logits.iter().all(|x| x.is_finite()) {
                return Err(LocalizeError::NonFinite("fine correlation"));
            }
            let p = softmax(&logits);
            let positions: Vec<Pixel> = idx.iter().map(|&i| query.fine.position_of(i)).collect();
            let center = query.coarse.position_of(m.cell);
            Ok(FineCorrespondence {
                point: m.point,
                location: window_expectation(center, &positions, p.as_slice()),
                confidence: p.max(),
                truncated,
            })
        })
        .collect()
}
