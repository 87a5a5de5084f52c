//! The semi-dense matcher seam.
//!
//! A [`Matcher`] produces coarse matches between stride-8 grid cells of two
//! views and refines a source location to sub-pixel accuracy relative to a
//! fixed reference location. [`OracleMatcher`] implements it on top of a
//! [`SyntheticScene`]; a learned two-view matcher would implement the same trait.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::features::dot;
use crate::geometry::{CameraIntrinsics, Pixel};
use crate::rng::{stream, Domain};
use crate::scene::{
    oracle_fine_location, DescriptorLevel, GridCell, SyntheticScene, ViewId, ViewObservations,
    GRID_STRIDE, REFINE_HALF_WINDOW,
};

/// Confidence reported when the oracle cannot identify the queried point.
pub const OUTLIER_CONFIDENCE: f64 = 0.1;

/// Above this many views, pairs are restricted to nearest neighbors.
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 50;
pub const PAIR_NEIGHBORS: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("location ({u}, {v}) outside the image of view {view}")]
    OutsideImage { view: ViewId, u: f64, v: f64 },
    #[error("unknown view {0}")]
    UnknownView(ViewId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    pub view_a: ViewId,
    pub view_b: ViewId,
    /// Cell centers (≡ 4 mod 8).
    pub cell_a: Pixel,
    pub cell_b: Pixel,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatchQuery {
    pub reference_view: ViewId,
    pub reference: Pixel,
    pub source_view: ViewId,
    /// Coarse source location (window center).
    pub source: Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatchResult {
    pub location: Pixel,
    pub confidence: f64,
}

pub trait Matcher: Sync {
    fn num_views(&self) -> usize;

    fn intrinsics(&self, view: ViewId) -> Option<CameraIntrinsics>;

    /// Coarse grid matches between two distinct views.
    fn coarse_matches(&self, view_a: ViewId, view_b: ViewId) -> Vec<CoarseMatch>;

    /// Sub-pixel location in the source view of the feature at the reference
    /// location; always within ±4 px of `q.source`.
    fn fine_refine(&self, q: &FineMatchQuery) -> Result<FineMatchResult, MatchError>;

    /// Location of the feature anchored at a coarse cell. A two-view matcher
    /// keeps the cell center itself.
    fn anchor(&self, _view: ViewId, cell: Pixel) -> Pixel {
        cell
    }

    /// Descriptor sampled at an image location.
    fn descriptor_at(&self, view: ViewId, location: Pixel, level: DescriptorLevel) -> Option<Vec<f64>>;
}

/// Coarse matches between two rendered views of a synthetic scene.
///
/// Every point that owns its cell in both views yields one match, so each
/// cell appears at most once per side. With probability `outlier_rate` a
/// match's `cell_b` is replaced by a uniformly random wrong cell.
pub fn coarse_match_pair(
    scene: &SyntheticScene,
    obs_a: &ViewObservations,
    obs_b: &ViewObservations,
    outlier_rate: f64,
) -> Vec<CoarseMatch> {
    if obs_a.view_id == obs_b.view_id {
        return Vec::new();
    }
    let k = scene.params.intrinsics;
    let (cols, rows) = (k.width / GRID_STRIDE, k.height / GRID_STRIDE);
    let pair_key = ((obs_a.view_id as u64) << 32) | obs_b.view_id as u64;
    let mut out = Vec::new();
    for (cell_a, p) in obs_a.owned_cells() {
        let Some(ob) = obs_b.get(p) else { continue };
        if obs_b.owner(ob.cell) != Some(p) {
            continue;
        }
        let da = scene.observed_descriptor(obs_a.view_id, p, DescriptorLevel::Coarse);
        let db = scene.observed_descriptor(obs_b.view_id, p, DescriptorLevel::Coarse);
        let mut m = CoarseMatch {
            view_a: obs_a.view_id,
            view_b: obs_b.view_id,
            cell_a: cell_a.center(),
            cell_b: ob.cell.center(),
            score: (0.5 * (1.0 + dot(&da, &db))).clamp(0.0, 1.0),
        };
        if outlier_rate > 0.0 {
            let mut rng = stream(scene.seed, Domain::Outliers, pair_key, p as u64);
            if rng.random::<f64>() < outlier_rate {
                let wrong = loop {
                    let c = GridCell {
                        x: rng.random_range(0..cols),
                        y: rng.random_range(0..rows),
                    };
                    if c != ob.cell {
                        break c;
                    }
                };
                m.cell_b = wrong.center();
                m.score = 0.5 * rng.random::<f64>();
            }
        }
        out.push(m);
    }
    out
}

/// View pairs to match: exhaustive up to [`EXHAUSTIVE_PAIR_LIMIT`] views,
/// otherwise each view with its [`PAIR_NEIGHBORS`] nearest camera centers.
/// Pairs are `(a, b)` with `a < b`, sorted.
pub fn select_pairs(centers: &[nalgebra::Vector3<f64>]) -> Vec<(ViewId, ViewId)> {
    let n = centers.len();
    if n <= EXHAUSTIVE_PAIR_LIMIT {
        return (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
    }
    let mut pairs = std::collections::BTreeSet::new();
    for a in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&b| b != a)
            .map(|b| ((centers[a] - centers[b]).norm(), b))
            .collect();
        others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, b) in others.iter().take(PAIR_NEIGHBORS) {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    pairs.into_iter().collect()
}

/// Matches all selected pairs in parallel; output ordered by pair.
pub fn match_pairs<M: Matcher + ?Sized>(matcher: &M, pairs: &[(ViewId, ViewId)]) -> Vec<CoarseMatch> {
    pairs
        .par_iter()
        .map(|&(a, b)| matcher.coarse_matches(a, b))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Matcher backed by the synthetic scene's ground truth.
pub struct OracleMatcher<'a> {
    scene: &'a SyntheticScene,
    observations: Vec<ViewObservations>,
    outlier_rate: f64,
}

impl<'a> OracleMatcher<'a> {
    pub fn new(scene: &'a SyntheticScene) -> Self {
        Self::with_observations(scene, crate::scene::render_all(scene))
    }

    pub fn with_observations(scene: &'a SyntheticScene, observations: Vec<ViewObservations>) -> Self {
        Self {
            scene,
            observations,
            outlier_rate: scene.params.noise.outlier_rate,
        }
    }

    pub fn scene(&self) -> &SyntheticScene {
        self.scene
    }

    pub fn observations(&self, view: ViewId) -> Option<&ViewObservations> {
        self.observations.get(view)
    }

    fn owner_at(&self, view: ViewId, location: Pixel) -> Option<usize> {
        let k = self.intrinsics(view)?;
        let cell = GridCell::checked(location, &k)?;
        self.observations.get(view)?.owner(cell)
    }
}

impl Matcher for OracleMatcher<'_> {
    fn num_views(&self) -> usize {
        self.observations.len()
    }

    fn intrinsics(&self, view: ViewId) -> Option<CameraIntrinsics> {
        self.scene.camera(view).map(|c| c.intrinsics)
    }

    fn coarse_matches(&self, view_a: ViewId, view_b: ViewId) -> Vec<CoarseMatch> {
        match (self.observations.get(view_a), self.observations.get(view_b)) {
            (Some(a), Some(b)) => coarse_match_pair(self.scene, a, b, self.outlier_rate),
            _ => Vec::new(),
        }
    }

    fn fine_refine(&self, q: &FineMatchQuery) -> Result<FineMatchResult, MatchError> {
        for (view, px) in [(q.reference_view, q.reference), (q.source_view, q.source)] {
            let k = self.intrinsics(view).ok_or(MatchError::UnknownView(view))?;
            if !k.contains(px) {
                return Err(MatchError::OutsideImage {
                    view,
                    u: px.u,
                    v: px.v,
                });
            }
        }
        let fallback = FineMatchResult {
            location: q.source,
            confidence: OUTLIER_CONFIDENCE,
        };
        let Some(point) = self.owner_at(q.reference_view, q.reference) else {
            return Ok(fallback);
        };
        if self.owner_at(q.source_view, q.source) != Some(point) {
            return Ok(fallback);
        }
        let obs = &self.observations[q.source_view];
        let location = oracle_fine_location(self.scene, obs, point)
            .expect("cell owner is visible in its view");
        debug_assert!(location.chebyshev(q.source) <= REFINE_HALF_WINDOW + 1e-9);
        Ok(FineMatchResult {
            location,
            confidence: 1.0,
        })
    }

    fn anchor(&self, view: ViewId, cell: Pixel) -> Pixel {
        self.owner_at(view, cell)
            .and_then(|p| self.observations[view].get(p))
            .map_or(cell, |o| o.pixel)
    }

    fn descriptor_at(&self, view: ViewId, location: Pixel, level: DescriptorLevel) -> Option<Vec<f64>> {
        let p = self.owner_at(view, location)?;
        Some(self.scene.observed_descriptor(view, p, level))
    }
}
