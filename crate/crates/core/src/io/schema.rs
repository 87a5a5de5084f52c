//! JSON documents and directory layouts exchanged between commands.
//!
//! A scene directory holds `scene.json` (parameters, points and cameras)
//! and `features.fmat` (`coarse_descriptors`, `fine_descriptors`). A model
//! directory holds `model.json` binding `refined.ply` to the rows of
//! `features.fmat` (`coarse_features`, `fine_features`), plus `coarse.ply`,
//! `tracks.json` and `stats.json`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{load_fmat, load_ply, read_json, save_fmat, save_ply, section, write_json, IoError, Section};
use crate::geometry::{Pixel, SE3Pose};
use crate::refine::{DepthStatus, PointCloudModel, RefinedTrack};
use crate::scene::{CameraView, SceneParams, SyntheticScene, ViewId};
use crate::tracks::FeatureTrack;

pub const SCENE_FILE: &str = "scene.json";
pub const FEATURES_FILE: &str = "features.fmat";
pub const MODEL_FILE: &str = "model.json";
pub const COARSE_PLY: &str = "coarse.ply";
pub const REFINED_PLY: &str = "refined.ply";
pub const TRACKS_FILE: &str = "tracks.json";
pub const STATS_FILE: &str = "stats.json";
pub const POSES_FILE: &str = "poses.json";
pub const METRICS_FILE: &str = "metrics.csv";

const SCENE_FORMAT: &str = "semidense-scene";
const MODEL_FORMAT: &str = "semidense-model";
const POSES_FORMAT: &str = "semidense-poses";
const SCHEMA_VERSION: u32 = 1;

fn check_header(kind: &str, expected: &str, version: u32) -> Result<(), IoError> {
    if kind != expected {
        return Err(IoError::format(format!("expected a {expected} document, found {kind}")));
    }
    if version != SCHEMA_VERSION {
        return Err(IoError::format(format!("unsupported {expected} version {version}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneDoc {
    format: String,
    version: u32,
    seed: u64,
    params: SceneParams,
    points: Vec<[f64; 3]>,
    views: Vec<CameraView>,
    query_views: Vec<CameraView>,
}

fn to_array(p: &Vector3<f64>) -> [f64; 3] {
    [p.x, p.y, p.z]
}

pub fn save_scene(dir: &Path, scene: &SyntheticScene) -> Result<(), IoError> {
    let doc = SceneDoc {
        format: SCENE_FORMAT.into(),
        version: SCHEMA_VERSION,
        seed: scene.seed,
        params: scene.params,
        points: scene.points.iter().map(to_array).collect(),
        views: scene.views.clone(),
        query_views: scene.query_views.clone(),
    };
    write_json(&dir.join(SCENE_FILE), &doc)?;
    save_fmat(
        &dir.join(FEATURES_FILE),
        &[
            Section::f64("coarse_descriptors", scene.coarse_descriptors.clone()),
            Section::f64("fine_descriptors", scene.fine_descriptors.clone()),
        ],
    )
}

pub fn load_scene(dir: &Path) -> Result<SyntheticScene, IoError> {
    let doc: SceneDoc = read_json(&dir.join(SCENE_FILE))?;
    check_header(&doc.format, SCENE_FORMAT, doc.version)?;
    doc.params.validate().map_err(|e| IoError::format(e.to_string()))?;
    let sections = load_fmat(&dir.join(FEATURES_FILE))?;
    let coarse = section(&sections, "coarse_descriptors")?.matrix.clone();
    let fine = section(&sections, "fine_descriptors")?.matrix.clone();
    let n = doc.points.len();
    if coarse.rows() != n || fine.rows() != n {
        return Err(IoError::format(format!(
            "descriptor rows ({}, {}) do not match {n} points",
            coarse.rows(),
            fine.rows()
        )));
    }
    if coarse.cols() != doc.params.coarse_dim || fine.cols() != doc.params.fine_dim {
        return Err(IoError::format("descriptor widths do not match scene parameters"));
    }
    if doc.views.len() != doc.params.n_views || doc.query_views.len() != doc.params.n_query_views {
        return Err(IoError::format("camera counts do not match scene parameters"));
    }
    for v in doc.views.iter().chain(&doc.query_views) {
        v.intrinsics.validate().map_err(|e| IoError::format(e.to_string()))?;
    }
    Ok(SyntheticScene {
        seed: doc.seed,
        params: doc.params,
        points: doc.points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
        coarse_descriptors: coarse,
        fine_descriptors: fine,
        views: doc.views,
        query_views: doc.query_views,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: usize,
    /// `[view, cell x, cell y]` per coarse node.
    pub nodes: Vec<[usize; 3]>,
    pub reference_view: ViewId,
    pub reference: [f64; 2],
    /// `[view, u, v]` per refined source node.
    pub sources: Vec<(ViewId, f64, f64)>,
    pub depth: f64,
    pub cost: f64,
    pub status: String,
}

pub fn status_name(s: DepthStatus) -> &'static str {
    match s {
        DepthStatus::Converged => "converged",
        DepthStatus::Unobservable => "unobservable",
        DepthStatus::ClampedDepth => "clamped_depth",
        DepthStatus::MaxIterations => "max_iterations",
    }
}

pub fn track_record(track: &FeatureTrack, refined: &RefinedTrack) -> TrackRecord {
    TrackRecord {
        id: track.id,
        nodes: track.nodes.iter().map(|n| [n.view, n.cell.x as usize, n.cell.y as usize]).collect(),
        reference_view: refined.reference_view,
        reference: [refined.reference.u, refined.reference.v],
        sources: refined.sources.iter().map(|&(v, p): &(ViewId, Pixel)| (v, p.u, p.v)).collect(),
        depth: refined.depth,
        cost: refined.cost,
        status: status_name(refined.status).into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    num_points: usize,
    points: String,
    features: String,
    coarse_points: String,
    tracks: String,
    stats: String,
    /// Track id of each point, in point order.
    track_ids: Vec<usize>,
}

/// Everything a reconstruction run writes.
pub struct ModelFiles<'a, S: Serialize> {
    pub coarse_points: &'a [Vector3<f64>],
    pub model: &'a PointCloudModel,
    pub tracks: &'a [TrackRecord],
    pub stats: &'a S,
    pub binary_ply: bool,
}

pub fn save_model<S: Serialize>(dir: &Path, files: &ModelFiles<'_, S>) -> Result<(), IoError> {
    let m = files.model;
    save_ply(&dir.join(COARSE_PLY), files.coarse_points, files.binary_ply)?;
    save_ply(&dir.join(REFINED_PLY), &m.points, files.binary_ply)?;
    save_fmat(
        &dir.join(FEATURES_FILE),
        &[
            Section::f64("coarse_features", m.coarse_features.clone()),
            Section::f64("fine_features", m.fine_features.clone()),
        ],
    )?;
    write_json(&dir.join(TRACKS_FILE), &files.tracks)?;
    write_json(&dir.join(STATS_FILE), files.stats)?;
    write_json(
        &dir.join(MODEL_FILE),
        &ModelDoc {
            format: MODEL_FORMAT.into(),
            version: SCHEMA_VERSION,
            num_points: m.len(),
            points: REFINED_PLY.into(),
            features: FEATURES_FILE.into(),
            coarse_points: COARSE_PLY.into(),
            tracks: TRACKS_FILE.into(),
            stats: STATS_FILE.into(),
            track_ids: m.track_ids.clone(),
        },
    )
}

pub fn load_model(dir: &Path) -> Result<PointCloudModel, IoError> {
    let doc: ModelDoc = read_json(&dir.join(MODEL_FILE))?;
    check_header(&doc.format, MODEL_FORMAT, doc.version)?;
    let points = load_ply(&dir.join(&doc.points))?;
    let sections = load_fmat(&dir.join(&doc.features))?;
    let coarse = section(&sections, "coarse_features")?.matrix.clone();
    let fine = section(&sections, "fine_features")?.matrix.clone();
    let n = doc.num_points;
    if points.len() != n || coarse.rows() != n || fine.rows() != n || doc.track_ids.len() != n {
        return Err(IoError::format(format!("model parts disagree on the point count {n}")));
    }
    Ok(PointCloudModel { points, coarse_features: coarse, fine_features: fine, track_ids: doc.track_ids })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPose {
    pub view_id: ViewId,
    /// World-to-camera, absent when estimation failed.
    pub pose: Option<SE3Pose>,
    pub failure: Option<String>,
    pub coarse_matches: usize,
    pub fine_matches: usize,
    pub inliers: usize,
    pub mean_inlier_error_px: Option<f64>,
    pub ransac_iterations: usize,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosesDoc {
    pub format: String,
    pub version: u32,
    pub queries: Vec<QueryPose>,
}

impl PosesDoc {
    pub fn new(queries: Vec<QueryPose>) -> Self {
        Self { format: POSES_FORMAT.into(), version: SCHEMA_VERSION, queries }
    }
}

pub fn load_poses(path: &Path) -> Result<PosesDoc, IoError> {
    let doc: PosesDoc = read_json(path)?;
    check_header(&doc.format, POSES_FORMAT, doc.version)?;
    Ok(doc)
}

/// Writes `j,u,v,conf` rows.
pub fn write_correspondences(path: &Path, rows: &[(usize, Pixel, f64)]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(super::create(path)?);
    let csv_err = |e: csv::Error| IoError::format(format!("{}: {e}", path.display()));
    w.write_record(["j", "u", "v", "conf"]).map_err(csv_err)?;
    for (j, p, c) in rows {
        w.serialize((j, p.u, p.v, c)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Counter maps serialize with string keys.
pub fn keyed<K: ToString, V: Copy>(m: &BTreeMap<K, V>) -> BTreeMap<String, V> {
    m.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, NoiseModel};

    #[test]
    fn scene_round_trip_is_exact() {
        let noise = NoiseModel { descriptor_noise_sigma: 0.1, ..NoiseModel::zero() };
        let params = SceneParams { n_points: 60, n_views: 4, n_query_views: 2, ..SceneParams::new(60, 4, noise) };
        let scene = generate_scene(11, params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &scene).unwrap();
        assert_eq!(load_scene(dir.path()).unwrap(), scene);
    }

    #[test]
    fn missing_or_foreign_documents_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_scene(dir.path()), Err(IoError::File { .. })));
        let doc = PosesDoc { format: "other".into(), version: 1, queries: vec![] };
        write_json(&dir.path().join("p.json"), &doc).unwrap();
        assert!(matches!(load_poses(&dir.path().join("p.json")), Err(IoError::Format(_))));
    }
}
