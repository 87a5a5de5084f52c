//! Coarse reconstruction: pairwise grid matches → multi-view tracks → points.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;

use crate::geometry::{
    reprojection_cost, triangulate_with, GeometryError, GeometryTolerances, Observation, Pixel,
};
use crate::matcher::CoarseMatch;
use crate::scene::{CameraView, GridCell, ViewId};

pub const DEFAULT_MIN_TRACK_LENGTH: usize = 3;
/// Mean reprojection error above which a coarse point is rejected, pixels.
pub const DEFAULT_MAX_REPROJ_PX: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrackNode {
    pub view: ViewId,
    pub cell: GridCell,
}

impl TrackNode {
    pub fn pixel(&self) -> Pixel {
        self.cell.center()
    }
}

/// Matched 2D grid locations observing one 3D point, at most one per view.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub id: usize,
    /// Sorted by view id.
    pub nodes: Vec<TrackNode>,
}

impl FeatureTrack {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackBuildStats {
    pub nodes: usize,
    pub components: usize,
    /// Component/view combinations holding more than one cell.
    pub conflicts: usize,
    pub dropped_nodes: usize,
    pub too_short: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<FeatureTrack>,
    pub stats: TrackBuildStats,
}

/// Fuses pairwise matches into tracks by union-find over `(view, cell)` nodes.
///
/// Inside a component, every view that contributes two or more distinct cells
/// loses all of its nodes there; the rest of the component survives. Tracks are
/// ordered by their first node, which makes the output independent of match order.
pub fn build_tracks(matches: &[CoarseMatch], min_track_length: usize) -> TrackSet {
    let mut index: BTreeMap<TrackNode, usize> = BTreeMap::new();
    for m in matches {
        index.insert(node(m.view_a, m.cell_a), 0);
        index.insert(node(m.view_b, m.cell_b), 0);
    }
    let nodes: Vec<TrackNode> = index.keys().copied().collect();
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }

    let mut uf = UnionFind::<usize>::new(nodes.len());
    for m in matches {
        if m.view_a == m.view_b {
            continue;
        }
        uf.union(index[&node(m.view_a, m.cell_a)], index[&node(m.view_b, m.cell_b)]);
    }

    let mut components: BTreeMap<usize, Vec<TrackNode>> = BTreeMap::new();
    let mut root_of: HashMap<usize, usize> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        let root = uf.find(i);
        // Key components by their smallest node so ordering never depends on roots.
        let key = *root_of.entry(root).or_insert(i);
        components.entry(key).or_default().push(*n);
    }

    let mut stats = TrackBuildStats {
        nodes: nodes.len(),
        components: components.len(),
        ..Default::default()
    };
    let mut tracks = Vec::new();
    for (_, comp) in components {
        let mut per_view: BTreeMap<ViewId, usize> = BTreeMap::new();
        for n in &comp {
            *per_view.entry(n.view).or_default() += 1;
        }
        let kept: Vec<TrackNode> = comp
            .iter()
            .filter(|n| per_view[&n.view] == 1)
            .copied()
            .collect();
        for &count in per_view.values().filter(|&&c| c > 1) {
            stats.conflicts += 1;
            stats.dropped_nodes += count;
        }
        if kept.len() < min_track_length.max(1) {
            stats.too_short += 1;
            continue;
        }
        tracks.push(kept);
    }
    tracks.sort_by_key(|t| t[0]);
    TrackSet {
        tracks: tracks
            .into_iter()
            .enumerate()
            .map(|(id, nodes)| FeatureTrack { id, nodes })
            .collect(),
        stats,
    }
}

fn node(view: ViewId, px: Pixel) -> TrackNode {
    TrackNode {
        view,
        cell: GridCell::of(px),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    Degenerate,
    Cheirality,
    Reprojection,
    UnknownView,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::Degenerate => "degenerate",
            RejectReason::Cheirality => "cheirality",
            RejectReason::Reprojection => "reprojection",
            RejectReason::UnknownView => "unknown_view",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructionStats {
    pub input_tracks: usize,
    pub triangulated: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
    /// Track length → count, over surviving tracks.
    pub length_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoarseReconstruction {
    pub tracks: Vec<FeatureTrack>,
    /// `points[i]` belongs to `tracks[i]`.
    pub points: Vec<Vector3<f64>>,
    pub rejections: Vec<(usize, RejectReason)>,
    pub stats: ReconstructionStats,
}

pub fn track_observations(track: &FeatureTrack, views: &[CameraView]) -> Option<Vec<Observation>> {
    track
        .nodes
        .iter()
        .map(|n| {
            views
                .get(n.view)
                .map(|v| Observation::new(v.pose, v.intrinsics, n.pixel()))
        })
        .collect()
}

/// Triangulates each track at its cell centers, rejecting per track.
pub fn triangulate_tracks(
    tracks: &[FeatureTrack],
    views: &[CameraView],
    max_reproj_px: f64,
    tol: &GeometryTolerances,
) -> CoarseReconstruction {
    let results: Vec<Result<Vector3<f64>, RejectReason>> = tracks
        .par_iter()
        .map(|t| {
            let obs = track_observations(t, views).ok_or(RejectReason::UnknownView)?;
            let p = triangulate_with(&obs, tol).map_err(|e| match e {
                GeometryError::Cheirality { .. } => RejectReason::Cheirality,
                _ => RejectReason::Degenerate,
            })?;
            let mean_err = obs
                .iter()
                .map(|o| reprojection_cost(std::slice::from_ref(o), &p).sqrt())
                .sum::<f64>()
                / obs.len() as f64;
            if !(mean_err <= max_reproj_px) {
                return Err(RejectReason::Reprojection);
            }
            Ok(p)
        })
        .collect();

    let mut out = CoarseReconstruction {
        stats: ReconstructionStats {
            input_tracks: tracks.len(),
            ..Default::default()
        },
        ..Default::default()
    };
    for (t, r) in tracks.iter().zip(results) {
        match r {
            Ok(p) => {
                *out.stats.length_histogram.entry(t.len()).or_default() += 1;
                out.tracks.push(t.clone());
                out.points.push(p);
            }
            Err(reason) => {
                *out.stats.rejected.entry(reason).or_default() += 1;
                out.rejections.push((t.id, reason));
            }
        }
    }
    out.stats.triangulated = out.points.len();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, CameraIntrinsics, SE3Pose};

    fn cm(a: ViewId, ua: f64, va: f64, b: ViewId, ub: f64, vb: f64) -> CoarseMatch {
        CoarseMatch {
            view_a: a,
            view_b: b,
            cell_a: Pixel::new(ua, va),
            cell_b: Pixel::new(ub, vb),
            score: 1.0,
        }
    }

    #[test]
    fn transitive_closure_forms_one_track() {
        let matches = vec![cm(0, 12.0, 20.0, 1, 36.0, 20.0), cm(1, 36.0, 20.0, 2, 44.0, 28.0)];
        let set = build_tracks(&matches, 3);
        assert_eq!(set.tracks.len(), 1);
        assert_eq!(set.tracks[0].len(), 3);
        assert_eq!(set.tracks[0].nodes[0].view, 0);
        assert_eq!(set.stats.conflicts, 0);
    }

    #[test]
    fn conflicting_cells_are_dropped() {
        // Two cells of view 0 end up in one component via view 1.
        let matches = vec![
            cm(0, 4.0, 4.0, 1, 12.0, 12.0),
            cm(0, 20.0, 4.0, 1, 12.0, 12.0),
            cm(1, 12.0, 12.0, 2, 28.0, 28.0),
            cm(2, 28.0, 28.0, 3, 36.0, 36.0),
        ];
        let set = build_tracks(&matches, 3);
        assert_eq!(set.stats.conflicts, 1);
        assert_eq!(set.stats.dropped_nodes, 2);
        assert_eq!(set.tracks.len(), 1);
        assert!(set.tracks[0].nodes.iter().all(|n| n.view != 0));
        assert_eq!(set.tracks[0].len(), 3);
    }

    #[test]
    fn short_tracks_discarded() {
        let set = build_tracks(&[cm(0, 4.0, 4.0, 1, 12.0, 12.0)], 3);
        assert!(set.tracks.is_empty());
        assert_eq!(set.stats.too_short, 1);
        let set = build_tracks(&[cm(0, 4.0, 4.0, 1, 12.0, 12.0)], 2);
        assert_eq!(set.tracks.len(), 1);
    }

    #[test]
    fn empty_input() {
        let set = build_tracks(&[], 3);
        assert!(set.tracks.is_empty());
        assert_eq!(set.stats, TrackBuildStats::default());
        let rec = triangulate_tracks(&[], &[], 12.0, &GeometryTolerances::default());
        assert!(rec.points.is_empty());
        assert_eq!(rec.stats.triangulated, 0);
        assert!(rec.stats.rejected.is_empty());
    }

    #[test]
    fn coincident_centers_rejected_as_degenerate() {
        let k = CameraIntrinsics::raw(600.0, 600.0, 256.0, 256.0, 512, 512);
        let c = Vector3::new(0.0, -4.0, 1.0);
        let views: Vec<CameraView> = (0..3)
            .map(|i| CameraView {
                pose: SE3Pose::look_at(c, Vector3::new(0.05 * i as f64, 0.0, 0.0), Vector3::z()).unwrap(),
                intrinsics: k,
            })
            .collect();
        let p = Vector3::new(0.0, 0.0, 0.0);
        let nodes = views
            .iter()
            .enumerate()
            .map(|(i, v)| TrackNode {
                view: i,
                cell: GridCell::of(project(&v.pose, &k, &p).unwrap()),
            })
            .collect();
        let track = FeatureTrack { id: 7, nodes };
        let rec = triangulate_tracks(&[track], &views, 12.0, &GeometryTolerances::default());
        assert!(rec.points.is_empty());
        assert_eq!(rec.rejections, vec![(7, RejectReason::Degenerate)]);
    }
}
