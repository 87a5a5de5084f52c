//! Track refinement.
//!
//! Each coarse track keeps one reference node fixed, its other nodes are
//! refined to sub-pixel locations by the matcher, and the 3D point is then
//! re-estimated along the reference ray: only the reference depth `d` is
//! optimized, minimizing
//!
//! ```text
//! Σ_k ‖ û_k − π(T_{r→k} · π⁻¹(u_r, d)) ‖²
//! ```
//!
//! over the source nodes `k`.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{normalize_in_place, FeatureMatrix};
use crate::geometry::{backproject, relative_pose, CameraIntrinsics, Pixel, SE3Pose};
use crate::matcher::{FineMatchQuery, Matcher};
use crate::scene::{CameraView, DescriptorLevel, ViewId};
use crate::tracks::{CoarseReconstruction, FeatureTrack};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unknown view {0}")]
    UnknownView(ViewId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Source nodes refined with lower confidence are dropped.
    pub min_confidence: f64,
    pub max_iterations: usize,
    /// Stop when `|Δcost| / cost` falls below this.
    pub relative_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.2,
            max_iterations: 50,
            relative_tolerance: 1e-8,
            initial_lambda: 1e-3,
        }
    }
}

/// Smallest depth the optimizer may step to.
pub const MIN_DEPTH: f64 = 1e-6;
/// Reprojections moving less than this many pixels for a 100% depth change
/// count as unobservable.
const FLAT_GRADIENT_PX: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthStatus {
    Converged,
    /// Cost has no usable slope in depth (e.g. ray through the epipole).
    Unobservable,
    /// Step would have driven the depth non-positive.
    ClampedDepth,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedTrack {
    pub track_id: usize,
    pub reference_view: ViewId,
    pub reference: Pixel,
    /// Refined source nodes.
    pub sources: Vec<(ViewId, Pixel)>,
    /// Depth along the reference ray, reference-camera frame.
    pub depth: f64,
    /// World-frame back-projection of `(reference, depth)`.
    pub point: Vector3<f64>,
    /// Sum of squared residuals before optimization.
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    pub status: DepthStatus,
}

impl RefinedTrack {
    pub fn converged(&self) -> bool {
        self.status == DepthStatus::Converged
    }

    /// Mean per-source reprojection error in pixels at the current depth.
    pub fn mean_error(&self, views: &[CameraView]) -> f64 {
        let r = depth_residuals(self, views, self.depth);
        r.iter().map(|x| x.norm()).sum::<f64>() / r.len().max(1) as f64
    }
}

/// Picks the node whose optical axis is, on average, best aligned with the
/// other nodes' rays toward the point. Ties go to the lowest view id.
pub fn select_reference_node(
    track: &FeatureTrack,
    point: &Vector3<f64>,
    views: &[CameraView],
) -> Result<usize, RefineError> {
    if track.nodes.len() < 2 {
        return Err(RefineError::Precondition(format!(
            "reference selection needs at least 2 nodes, track {} has {}",
            track.id,
            track.nodes.len()
        )));
    }
    let cams: Vec<&CameraView> = track
        .nodes
        .iter()
        .map(|n| views.get(n.view).ok_or(RefineError::UnknownView(n.view)))
        .collect::<Result<_, _>>()?;
    let rays: Vec<Vector3<f64>> = cams
        .iter()
        .map(|c| (point - c.pose.center()).normalize())
        .collect();
    let mut best = (f64::INFINITY, 0usize);
    for (k, cam) in cams.iter().enumerate() {
        let axis = cam.pose.optical_axis();
        let mean = rays
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, r)| axis.dot(r).clamp(-1.0, 1.0).acos())
            .sum::<f64>()
            / (rays.len() - 1) as f64;
        // Nodes are sorted by view id, so a strict improvement keeps the lowest id on ties.
        if mean < best.0 - 1e-12 {
            best = (mean, k);
        }
    }
    Ok(best.1)
}

/// Outcome of refining one track's source nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeRefinement {
    Refined(RefinedTrack),
    /// No source node reached the confidence threshold.
    Dropped { low_confidence: usize },
}

/// Fixes the reference node, refines every other node with the matcher and
/// initializes the depth from the coarse point.
pub fn refine_track_nodes<M: Matcher + ?Sized>(
    track: &FeatureTrack,
    reference_idx: usize,
    coarse_point: &Vector3<f64>,
    views: &[CameraView],
    matcher: &M,
    config: &RefineConfig,
) -> Result<NodeRefinement, RefineError> {
    let reference_node = track.nodes.get(reference_idx).ok_or_else(|| {
        RefineError::Precondition(format!("reference index {reference_idx} out of range"))
    })?;
    let reference_view = reference_node.view;
    let ref_cam = views
        .get(reference_view)
        .ok_or(RefineError::UnknownView(reference_view))?;
    let reference = matcher.anchor(reference_view, reference_node.pixel());

    let mut sources = Vec::with_capacity(track.nodes.len() - 1);
    let mut low_confidence = 0;
    for (i, n) in track.nodes.iter().enumerate() {
        if i == reference_idx {
            continue;
        }
        let q = FineMatchQuery {
            reference_view,
            reference,
            source_view: n.view,
            source: n.pixel(),
        };
        match matcher.fine_refine(&q) {
            Ok(r) if r.confidence >= config.min_confidence => sources.push((n.view, r.location)),
            _ => low_confidence += 1,
        }
    }
    if sources.is_empty() {
        return Ok(NodeRefinement::Dropped { low_confidence });
    }

    let depth = ref_cam.pose.transform_point(coarse_point).z;
    if !(depth > 0.0) {
        return Err(RefineError::Precondition(format!(
            "coarse point behind reference camera (z = {depth})"
        )));
    }
    let mut rt = RefinedTrack {
        track_id: track.id,
        reference_view,
        reference,
        sources,
        depth,
        point: Vector3::zeros(),
        initial_cost: 0.0,
        cost: 0.0,
        iterations: 0,
        status: DepthStatus::MaxIterations,
    };
    rt.point = point_at_depth(&rt, ref_cam, depth);
    rt.initial_cost = depth_cost(&rt, views, depth);
    rt.cost = rt.initial_cost;
    Ok(NodeRefinement::Refined(rt))
}

fn point_at_depth(rt: &RefinedTrack, ref_cam: &CameraView, depth: f64) -> Vector3<f64> {
    let pc = backproject(rt.reference, depth, &ref_cam.intrinsics).expect("positive depth");
    ref_cam.pose.inverse().transform_point(&pc)
}

struct SourceGeometry {
    rel: SE3Pose,
    k: CameraIntrinsics,
    target: Pixel,
}

fn source_geometry(rt: &RefinedTrack, views: &[CameraView]) -> (Vector3<f64>, Vec<SourceGeometry>) {
    let r = &views[rt.reference_view];
    let ray = Vector3::new(
        (rt.reference.u - r.intrinsics.cx) / r.intrinsics.fx,
        (rt.reference.v - r.intrinsics.cy) / r.intrinsics.fy,
        1.0,
    );
    let sources = rt
        .sources
        .iter()
        .map(|&(v, target)| SourceGeometry {
            rel: relative_pose(&r.pose, &views[v].pose),
            k: views[v].intrinsics,
            target,
        })
        .collect();
    (ray, sources)
}

/// Per-source residuals `û_k − π(T_{r→k} · π⁻¹(u_r, d))`.
pub fn depth_residuals(rt: &RefinedTrack, views: &[CameraView], depth: f64) -> Vec<Vector2<f64>> {
    let (ray, sources) = source_geometry(rt, views);
    sources
        .iter()
        .map(|s| {
            let xs = s.rel.transform_point(&(ray * depth));
            let px = s.k.project_camera(&xs);
            Vector2::new(s.target.u - px.u, s.target.v - px.v)
        })
        .collect()
}

/// Sum of squared residuals; infinite if any source sees the point behind it.
pub fn depth_cost(rt: &RefinedTrack, views: &[CameraView], depth: f64) -> f64 {
    let (ray, sources) = source_geometry(rt, views);
    let mut cost = 0.0;
    for s in &sources {
        let xs = s.rel.transform_point(&(ray * depth));
        if !(xs.z > 0.0) {
            return f64::INFINITY;
        }
        let px = s.k.project_camera(&xs);
        cost += (s.target.u - px.u).powi(2) + (s.target.v - px.v).powi(2);
    }
    cost
}

/// Analytic derivative of each source residual with respect to the depth.
pub fn depth_jacobian(rt: &RefinedTrack, views: &[CameraView], depth: f64) -> Vec<Vector2<f64>> {
    let (ray, sources) = source_geometry(rt, views);
    sources
        .iter()
        .map(|s| {
            let xs = s.rel.transform_point(&(ray * depth));
            let dxs = s.rel.rotation() * ray;
            -(s.k.projection_jacobian(&xs) * dxs)
        })
        .collect()
}

fn gradient_terms(rt: &RefinedTrack, views: &[CameraView], depth: f64) -> (f64, f64) {
    let r = depth_residuals(rt, views, depth);
    let j = depth_jacobian(rt, views, depth);
    r.iter()
        .zip(&j)
        .fold((0.0, 0.0), |(g, h), (r, j)| (g + j.dot(r), h + j.dot(j)))
}

/// Levenberg-Marquardt over the scalar reference depth.
///
/// Only cost-decreasing steps are accepted, so the returned cost never
/// exceeds the initial one.
pub fn optimize_depth(rt: &RefinedTrack, views: &[CameraView], config: &RefineConfig) -> Result<RefinedTrack, RefineError> {
    let ref_cam = views
        .get(rt.reference_view)
        .ok_or(RefineError::UnknownView(rt.reference_view))?;
    for (v, _) in &rt.sources {
        views.get(*v).ok_or(RefineError::UnknownView(*v))?;
    }
    if !(rt.depth > 0.0) {
        return Err(RefineError::Precondition(format!(
            "initial depth must be positive, got {}",
            rt.depth
        )));
    }

    let mut depth = rt.depth;
    let mut cost = depth_cost(rt, views, depth);
    let initial_cost = cost;
    let mut lambda = config.initial_lambda;
    let mut status = DepthStatus::MaxIterations;
    let mut clamped = false;
    let mut iterations = 0;

    if cost.is_finite() {
        while iterations < config.max_iterations {
            if cost <= f64::MIN_POSITIVE {
                status = DepthStatus::Converged;
                break;
            }
            iterations += 1;
            let (g, h) = gradient_terms(rt, views, depth);
            if !(h.sqrt() * depth > FLAT_GRADIENT_PX) {
                status = DepthStatus::Unobservable;
                break;
            }
            let mut accepted = false;
            while lambda < 1e16 {
                let mut next = depth - g / (h * (1.0 + lambda));
                let mut hit_floor = false;
                if !(next > MIN_DEPTH) {
                    next = MIN_DEPTH;
                    hit_floor = true;
                }
                let next_cost = depth_cost(rt, views, next);
                if next_cost < cost {
                    let rel_change = (cost - next_cost) / cost;
                    depth = next;
                    cost = next_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    clamped |= hit_floor;
                    accepted = true;
                    if rel_change < config.relative_tolerance {
                        status = DepthStatus::Converged;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                // No decreasing step exists at any damping: a numerical minimum.
                status = DepthStatus::Converged;
                break;
            }
            if status == DepthStatus::Converged {
                break;
            }
        }
    }
    if clamped {
        status = DepthStatus::ClampedDepth;
    }

    let mut out = rt.clone();
    out.depth = depth;
    out.point = point_at_depth(rt, ref_cam, depth);
    out.initial_cost = initial_cost;
    out.cost = cost;
    out.iterations = iterations;
    out.status = status;
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineStats {
    pub input_tracks: usize,
    pub refined: usize,
    pub dropped_tracks: usize,
    pub dropped_nodes: usize,
    pub unobservable: usize,
    pub clamped: usize,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Refinement {
    pub tracks: Vec<RefinedTrack>,
    pub stats: RefineStats,
}

/// Runs reference selection, node refinement and depth optimization over a
/// coarse reconstruction. Output is ordered by track id.
pub fn refine_reconstruction<M: Matcher + ?Sized>(
    coarse: &CoarseReconstruction,
    views: &[CameraView],
    matcher: &M,
    config: &RefineConfig,
) -> Refinement {
    let results: Vec<Result<(NodeRefinement, Option<RefinedTrack>), RefineError>> = coarse
        .tracks
        .par_iter()
        .zip(coarse.points.par_iter())
        .map(|(track, point)| {
            let idx = select_reference_node(track, point, views)?;
            let nodes = refine_track_nodes(track, idx, point, views, matcher, config)?;
            let optimized = match &nodes {
                NodeRefinement::Refined(rt) => Some(optimize_depth(rt, views, config)?),
                NodeRefinement::Dropped { .. } => None,
            };
            Ok((nodes, optimized))
        })
        .collect();

    let mut out = Refinement {
        stats: RefineStats {
            input_tracks: coarse.tracks.len(),
            ..Default::default()
        },
        ..Default::default()
    };
    for (track, r) in coarse.tracks.iter().zip(results) {
        match r {
            Ok((NodeRefinement::Dropped { low_confidence }, _)) => {
                out.stats.dropped_tracks += 1;
                out.stats.dropped_nodes += low_confidence;
            }
            Ok((NodeRefinement::Refined(pre), Some(rt))) => {
                out.stats.dropped_nodes += track.len() - 1 - pre.sources.len();
                match rt.status {
                    DepthStatus::Converged => {}
                    DepthStatus::Unobservable => out.stats.unobservable += 1,
                    DepthStatus::ClampedDepth => out.stats.clamped += 1,
                    DepthStatus::MaxIterations => out.stats.max_iterations += 1,
                }
                out.stats.refined += 1;
                out.tracks.push(rt);
            }
            _ => out.stats.dropped_tracks += 1,
        }
    }
    out
}

/// Refined points with averaged coarse and fine descriptors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloudModel {
    pub points: Vec<Vector3<f64>>,
    pub coarse_features: FeatureMatrix,
    pub fine_features: FeatureMatrix,
    /// Source track id of each point.
    pub track_ids: Vec<usize>,
}

impl PointCloudModel {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset of points, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            coarse_features: self.coarse_features.select_rows(idx),
            fine_features: self.fine_features.select_rows(idx),
            track_ids: idx.iter().map(|&i| self.track_ids[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregation {
    pub model: PointCloudModel,
    /// Tracks whose mean descriptor vanished or had no descriptors at all.
    pub degenerate: Vec<usize>,
}

fn mean_direction(rows: &[Vec<f64>]) -> Option<Vec<f64>> {
    let dim = rows.first()?.len();
    let mut acc = vec![0.0; dim];
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    normalize_in_place(&mut acc).then_some(acc)
}

/// Averages the descriptors observed at every node of each track and
/// renormalizes them. Tracks with an undefined mean direction are dropped.
pub fn aggregate_features<M: Matcher + ?Sized>(tracks: &[RefinedTrack], matcher: &M) -> Aggregation {
    let mut out = Aggregation::default();
    for rt in tracks {
        let locations = std::iter::once((rt.reference_view, rt.reference)).chain(rt.sources.iter().copied());
        let mut coarse = Vec::new();
        let mut fine = Vec::new();
        for (view, px) in locations {
            if let Some(d) = matcher.descriptor_at(view, px, DescriptorLevel::Coarse) {
                coarse.push(d);
            }
            if let Some(d) = matcher.descriptor_at(view, px, DescriptorLevel::Fine) {
                fine.push(d);
            }
        }
        match (mean_direction(&coarse), mean_direction(&fine)) {
            (Some(c), Some(f)) => {
                out.model.points.push(rt.point);
                out.model.coarse_features.push_row(&c);
                out.model.fine_features.push_row(&f);
                out.model.track_ids.push(rt.track_id);
            }
            _ => out.degenerate.push(rt.track_id),
        }
    }
    out
}
