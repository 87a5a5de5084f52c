//! Linear-attention transformer layers shared by the coarse and fine stages.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("missing weight section {0}")]
    MissingWeight(String),
    #[error("non-finite weight in {0}")]
    NonFinite(String),
}

/// Smallest allowed attention normalizer.
pub const MIN_DENOMINATOR: f64 = 1e-6;

/// Positive feature map `elu(x) + 1`.
#[inline]
pub fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// `out_i = Σ_j φ(q_i)·φ(k_j) v_j / Σ_j φ(q_i)·φ(k_j)`, computed in
/// `O(N·C²)` by summing `φ(k_j)ᵀ v_j` once.
pub fn linear_attention(
    queries: &DMatrix<f64>,
    keys: &DMatrix<f64>,
    values: &DMatrix<f64>,
) -> Result<DMatrix<f64>, AttentionError> {
    if queries.ncols() != keys.ncols() {
        return Err(AttentionError::Dimension(format!(
            "query width {} vs key width {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    if keys.nrows() != values.nrows() {
        return Err(AttentionError::Dimension(format!(
            "{} keys vs {} values",
            keys.nrows(),
            values.nrows()
        )));
    }
    let fq = queries.map(phi);
    let fk = keys.map(phi);
    let kv = fk.transpose() * values;
    let ksum = fk.row_sum();
    let mut out = &fq * kv;
    for i in 0..out.nrows() {
        let den = fq.row(i).dot(&ksum).max(MIN_DENOMINATOR);
        out.row_mut(i).unscale_mut(den);
    }
    Ok(out)
}

pub const WEIGHT_NAMES: [&str; 5] = ["q", "k", "v", "ff1", "ff2"];

/// One attention block: projections, residual message and a two-layer
/// ReLU feed-forward, all `C×C` and applied to row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub ff1: DMatrix<f64>,
    pub ff2: DMatrix<f64>,
}

impl AttentionBlock {
    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    fn weights(&self) -> [&DMatrix<f64>; 5] {
        [&self.q, &self.k, &self.v, &self.ff1, &self.ff2]
    }

    /// Near-identity projections with small seeded perturbations, so an
    /// untrained stack approximately preserves descriptor similarity.
    pub fn seeded(dim: usize, seed: u64, layer: u64, block: u64) -> Self {
        let mut rng = stream(seed, Domain::Weights, layer, block);
        let scale = 0.01 / (dim as f64).sqrt();
        let mut noise = |base: f64| {
            DMatrix::from_fn(dim, dim, |r, c| {
                let id = if r == c { base } else { 0.0 };
                id + scale * rng.sample::<f64, _>(StandardNormal)
            })
        };
        Self {
            q: noise(1.0),
            k: noise(1.0),
            v: noise(0.1),
            ff1: noise(0.0),
            ff2: noise(0.0),
        }
    }

    /// `x + m + ff2(relu(ff1(x + m)))` with `m = attn(x Wq, s Wk, s Wv)`.
    pub fn apply(&self, x: &DMatrix<f64>, source: &DMatrix<f64>) -> Result<DMatrix<f64>, AttentionError> {
        let c = self.dim();
        if x.ncols() != c || source.ncols() != c {
            return Err(AttentionError::Dimension(format!(
                "block width {c}, inputs {} and {}",
                x.ncols(),
                source.ncols()
            )));
        }
        if source.nrows() == 0 {
            return Ok(x.clone());
        }
        let m = linear_attention(&(x * &self.q), &(source * &self.k), &(source * &self.v))?;
        let h = x + m;
        let hidden = (&h * &self.ff1).map(|z| z.max(0.0));
        Ok(&h + hidden * &self.ff2)
    }
}

/// `N` interleaved self/cross layers updating 3D and 2D tokens together.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub dim: usize,
    /// `(self, cross)` per layer.
    pub layers: Vec<(AttentionBlock, AttentionBlock)>,
}

impl AttentionStack {
    /// Zero layers: features pass through unchanged.
    pub fn bypass(dim: usize) -> Self {
        Self { dim, layers: Vec::new() }
    }

    pub fn seeded(dim: usize, layers: usize, seed: u64) -> Self {
        Self {
            dim,
            layers: (0..layers as u64)
                .map(|i| (AttentionBlock::seeded(dim, seed, i, 0), AttentionBlock::seeded(dim, seed, i, 1)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Transforms both token sets and renormalizes their rows.
    pub fn apply(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), AttentionError> {
        let mut a = a.clone();
        let mut b = b.clone();
        if self.layers.is_empty() {
            return Ok((a, b));
        }
        for (self_block, cross_block) in &self.layers {
            a = self_block.apply(&a, &a)?;
            b = self_block.apply(&b, &b)?;
            let a_next = cross_block.apply(&a, &b)?;
            b = cross_block.apply(&b, &a)?;
            a = a_next;
        }
        normalize_rows(&mut a);
        normalize_rows(&mut b);
        Ok((a, b))
    }

    /// Weight sections named `layer{i}.{self|cross}.{q|k|v|ff1|ff2}`.
    pub fn to_sections(&self) -> Vec<(String, FeatureMatrix)> {
        let mut out = Vec::new();
        for (i, (s, c)) in self.layers.iter().enumerate() {
            for (kind, block) in [("self", s), ("cross", c)] {
                for (name, w) in WEIGHT_NAMES.iter().zip(block.weights()) {
                    out.push((format!("layer{i}.{kind}.{name}"), FeatureMatrix::from_dmatrix(w)));
                }
            }
        }
        out
    }

    /// Reads as many consecutive layers as are fully present.
    pub fn from_sections(sections: &BTreeMap<String, FeatureMatrix>) -> Result<Self, AttentionError> {
        let mut layers = Vec::new();
        let mut dim = None;
        while sections.contains_key(&format!("layer{}.self.q", layers.len())) {
            let i = layers.len();
            let mut read = |kind: &str| -> Result<AttentionBlock, AttentionError> {
                let mut ws = Vec::with_capacity(5);
                for name in WEIGHT_NAMES {
                    let key = format!("layer{i}.{kind}.{name}");
                    let m = sections.get(&key).ok_or_else(|| AttentionError::MissingWeight(key.clone()))?;
                    let d = *dim.get_or_insert(m.rows());
                    if m.rows() != d || m.cols() != d {
                        return Err(AttentionError::Dimension(format!(
                            "{key} is {}×{}, expected {d}×{d}",
                            m.rows(),
                            m.cols()
                        )));
                    }
                    if !m.all_finite() {
                        return Err(AttentionError::NonFinite(key));
                    }
                    ws.push(m.to_dmatrix());
                }
                let mut it = ws.into_iter();
                let mut next = || it.next().expect("five weights");
                Ok(AttentionBlock { q: next(), k: next(), v: next(), ff1: next(), ff2: next() })
            };
            let s = read("self")?;
            let c = read("cross")?;
            layers.push((s, c));
        }
        Ok(Self { dim: dim.unwrap_or(0), layers })
    }
}

pub fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut r in m.row_iter_mut() {
        let n = r.norm();
        if n > 1e-12 {
            r.unscale_mut(n);
        }
    }
}
