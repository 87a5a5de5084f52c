//! End-to-end commands: synthesize a scene, reconstruct a model, estimate
//! query poses and evaluate them. Each command reads and writes files so the
//! stages can also be run separately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryTolerances;
use crate::io::{self, IoError, QueryPose, TrackRecord};
use crate::localize::{self, AttentionStack, MatchingConfig};
use crate::matcher::{match_pairs, select_pairs, OracleMatcher};
use crate::metrics;
use crate::pnp::{self, Correspondence, RansacConfig};
use crate::refine::{aggregate_features, refine_reconstruction, RefineConfig};
use crate::rng::{mix_key, Domain};
use crate::scene::{generate_scene, render_observations, SceneParams, SyntheticScene, CM_PER_UNIT};
use crate::tracks::{build_tracks, triangulate_tracks, DEFAULT_MAX_REPROJ_PX, DEFAULT_MIN_TRACK_LENGTH};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("empty result: {0}")]
    Empty(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Io(_) => 2,
            PipelineError::Empty(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub min_track_length: usize,
    pub max_reproj_px: f64,
    /// Refined source nodes below this confidence are dropped.
    pub min_confidence: f64,
    pub binary_ply: bool,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            min_track_length: DEFAULT_MIN_TRACK_LENGTH,
            max_reproj_px: DEFAULT_MAX_REPROJ_PX,
            min_confidence: RefineConfig::default().min_confidence,
            binary_ply: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingParams {
    pub tau: f64,
    pub theta: f64,
    pub window: usize,
    /// Coarse attention layers; 0 compares raw descriptors.
    pub n_coarse: usize,
    pub n_fine: usize,
    pub fine_temperature: f64,
    pub pe_weight: f64,
    /// FMAT weight files; seeded near-identity weights when absent.
    pub coarse_weights: Option<PathBuf>,
    pub fine_weights: Option<PathBuf>,
}

impl Default for MatchingParams {
    fn default() -> Self {
        let m = MatchingConfig::default();
        Self {
            tau: m.tau,
            theta: m.theta,
            window: m.window,
            n_coarse: 3,
            n_fine: 1,
            fine_temperature: m.fine_temperature,
            pe_weight: m.pe_weight,
            coarse_weights: None,
            fine_weights: None,
        }
    }
}

impl MatchingParams {
    pub fn config(&self) -> MatchingConfig {
        MatchingConfig {
            tau: self.tau,
            theta: self.theta,
            window: self.window,
            fine_temperature: self.fine_temperature,
            pe_weight: self.pe_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Defaults to 3 px scaled by image width / 512.
    pub inlier_px: Option<f64>,
    pub max_iters: usize,
    pub confidence: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { inlier_px: None, max_iters: 10000, confidence: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneParams,
    pub reconstruction: ReconstructionConfig,
    pub matching: MatchingParams,
    pub solver: SolverConfig,
    /// Use ADD-S instead of ADD.
    pub symmetric: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scene: SceneParams::default(),
            reconstruction: ReconstructionConfig::default(),
            matching: MatchingParams::default(),
            solver: SolverConfig::default(),
            symmetric: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(|e| PipelineError::Usage(e.to_string()))?;
        let m = &self.matching;
        let mut problems = Vec::new();
        if !(m.tau > 0.0) {
            problems.push("matching.tau must be positive");
        }
        if !(0.0..=1.0).contains(&m.theta) {
            problems.push("matching.theta must lie in [0, 1]");
        }
        if m.window == 0 || m.window % 2 == 0 {
            problems.push("matching.window must be odd");
        }
        if !(m.fine_temperature > 0.0) {
            problems.push("matching.fine_temperature must be positive");
        }
        if self.reconstruction.min_track_length < 2 {
            problems.push("reconstruction.min_track_length must be at least 2");
        }
        if !(self.reconstruction.max_reproj_px > 0.0) {
            problems.push("reconstruction.max_reproj_px must be positive");
        }
        if !(0.0..=1.0).contains(&self.reconstruction.min_confidence) {
            problems.push("reconstruction.min_confidence must lie in [0, 1]");
        }
        if self.solver.inlier_px.is_some_and(|t| !(t > 0.0)) {
            problems.push("solver.inlier_px must be positive");
        }
        if self.solver.max_iters == 0 || !(self.solver.confidence > 0.0 && self.solver.confidence < 1.0) {
            problems.push("solver needs max_iters > 0 and confidence in (0, 1)");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Usage(problems.join("; ")))
        }
    }
}

/// Writes `scene.json` and `features.fmat`.
pub fn synth(config: &RunConfig, out: &Path) -> Result<SyntheticScene> {
    config.validate()?;
    let scene = generate_scene(config.seed, config.scene).map_err(|e| PipelineError::Usage(e.to_string()))?;
    io::save_scene(out, &scene)?;
    Ok(scene)
}

/// Point-cloud accuracy thresholds in scene units and their labels
/// (1 unit = 1 object diameter = 10 cm).
pub const ACCURACY_THRESHOLDS: [(f64, &str); 4] = [
    (0.001, "0.1pct_diameter"),
    (0.01, "1mm"),
    (0.03, "3mm"),
    (0.05, "5mm"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub coarse: BTreeMap<String, f64>,
    pub refined: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub view_pairs: usize,
    pub coarse_matches: usize,
    pub track_nodes: usize,
    pub components: usize,
    pub conflicts: usize,
    pub conflict_dropped_nodes: usize,
    pub short_tracks: usize,
    pub tracks: usize,
    pub triangulated: usize,
    pub rejected: BTreeMap<String, usize>,
    pub track_length_histogram: BTreeMap<String, usize>,
    pub refined: usize,
    pub refine_dropped_tracks: usize,
    pub refine_dropped_nodes: usize,
    pub unobservable: usize,
    pub clamped_depth: usize,
    pub max_iterations: usize,
    pub degenerate_features: usize,
    pub points: usize,
    pub accuracy: AccuracyReport,
}

fn accuracy(points: &[nalgebra::Vector3<f64>], gt: &[nalgebra::Vector3<f64>]) -> BTreeMap<String, f64> {
    let t: Vec<f64> = ACCURACY_THRESHOLDS.iter().map(|x| x.0).collect();
    let fr = metrics::point_cloud_accuracy(points, gt, &t);
    ACCURACY_THRESHOLDS.iter().zip(fr).map(|((_, l), f)| (l.to_string(), f)).collect()
}

/// Matching, track building, triangulation, refinement and feature
/// aggregation over the reference views of a scene.
pub fn reconstruct_scene(scene: &SyntheticScene, config: &RunConfig) -> (crate::refine::PointCloudModel, Vec<nalgebra::Vector3<f64>>, Vec<TrackRecord>, ReconstructionReport) {
    let matcher = OracleMatcher::new(scene);
    let centers: Vec<_> = scene.views.iter().map(|v| v.pose.center()).collect();
    let pairs = select_pairs(&centers);
    let matches = match_pairs(&matcher, &pairs);
    let rc = &config.reconstruction;
    let set = build_tracks(&matches, rc.min_track_length);
    let coarse = triangulate_tracks(&set.tracks, &scene.views, rc.max_reproj_px, &GeometryTolerances::default());
    let refine_config = RefineConfig { min_confidence: rc.min_confidence, ..RefineConfig::default() };
    let refined = refine_reconstruction(&coarse, &scene.views, &matcher, &refine_config);
    let agg = aggregate_features(&refined.tracks, &matcher);

    let by_id: BTreeMap<usize, &crate::tracks::FeatureTrack> = coarse.tracks.iter().map(|t| (t.id, t)).collect();
    let records: Vec<TrackRecord> = refined
        .tracks
        .iter()
        .map(|rt| io::track_record(by_id[&rt.track_id], rt))
        .collect();

    let report = ReconstructionReport {
        view_pairs: pairs.len(),
        coarse_matches: matches.len(),
        track_nodes: set.stats.nodes,
        components: set.stats.components,
        conflicts: set.stats.conflicts,
        conflict_dropped_nodes: set.stats.dropped_nodes,
        short_tracks: set.stats.too_short,
        tracks: set.tracks.len(),
        triangulated: coarse.stats.triangulated,
        rejected: coarse.stats.rejected.iter().map(|(k, v)| (k.as_str().to_string(), *v)).collect(),
        track_length_histogram: io::keyed(&coarse.stats.length_histogram),
        refined: refined.stats.refined,
        refine_dropped_tracks: refined.stats.dropped_tracks,
        refine_dropped_nodes: refined.stats.dropped_nodes,
        unobservable: refined.stats.unobservable,
        clamped_depth: refined.stats.clamped,
        max_iterations: refined.stats.max_iterations,
        degenerate_features: agg.degenerate.len(),
        points: agg.model.len(),
        accuracy: AccuracyReport {
            coarse: accuracy(&coarse.points, &scene.points),
            refined: accuracy(&agg.model.points, &scene.points),
        },
    };
    (agg.model, coarse.points, records, report)
}

/// Writes a model directory; fails with an empty result when no point survives.
pub fn reconstruct(scene_dir: &Path, config: &RunConfig, out: &Path) -> Result<ReconstructionReport> {
    config.validate()?;
    let scene = io::load_scene(scene_dir)?;
    let (model, coarse_points, records, report) = reconstruct_scene(&scene, config);
    io::save_model(
        out,
        &io::ModelFiles {
            coarse_points: &coarse_points,
            model: &model,
            tracks: &records,
            stats: &report,
            binary_ply: config.reconstruction.binary_ply,
        },
    )?;
    if model.is_empty() {
        return Err(PipelineError::Empty("no feature track survived reconstruction".into()));
    }
    Ok(report)
}

fn load_stack(path: &Option<PathBuf>, layers: usize, dim: usize, seed: u64, level: u64) -> Result<AttentionStack> {
    if layers == 0 {
        return Ok(AttentionStack::bypass(dim));
    }
    let Some(path) = path else {
        return Ok(AttentionStack::seeded(dim, layers, mix_key(seed, Domain::Weights, level, 0)));
    };
    let sections: BTreeMap<_, _> = io::load_fmat(path)?.into_iter().map(|s| (s.name, s.matrix)).collect();
    let stack = AttentionStack::from_sections(&sections).map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))?;
    if stack.len() != layers || stack.dim != dim {
        return Err(PipelineError::Usage(format!(
            "{} holds {} layers of width {}, expected {layers} of width {dim}",
            path.display(),
            stack.len(),
            stack.dim
        )));
    }
    Ok(stack)
}

/// Correspondences and pose of a single query view.
pub struct QueryEstimate {
    pub record: QueryPose,
    pub correspondences: Vec<(usize, crate::geometry::Pixel, f64)>,
}

pub struct Localizer<'a> {
    pub model: &'a crate::refine::PointCloudModel,
    pub coarse_stack: AttentionStack,
    pub fine_stack: AttentionStack,
    pub matching: MatchingConfig,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl<'a> Localizer<'a> {
    pub fn new(model: &'a crate::refine::PointCloudModel, scene: &SyntheticScene, config: &RunConfig) -> Result<Self> {
        let m = &config.matching;
        Ok(Self {
            model,
            coarse_stack: load_stack(&m.coarse_weights, m.n_coarse, scene.params.coarse_dim, config.seed, 0)?,
            fine_stack: load_stack(&m.fine_weights, m.n_fine, scene.params.fine_dim, config.seed, 1)?,
            matching: m.config(),
            seed: config.seed,
            solver: config.solver.clone(),
        })
    }

    pub fn estimate(&self, scene: &SyntheticScene, view_id: usize) -> Result<QueryEstimate> {
        let start = Instant::now();
        let obs = render_observations(scene, view_id).map_err(|e| PipelineError::Usage(e.to_string()))?;
        let maps = localize::synthesize_query_maps(scene, &obs);
        let fail = |e: &dyn std::fmt::Display| PipelineError::Usage(format!("query {view_id}: {e}"));
        let coarse = localize::coarse_match_2d3d(self.model, &maps, &self.coarse_stack, &self.matching).map_err(|e| fail(&e))?;
        let fine = localize::fine_match_2d3d(self.model, &maps, &coarse.matches, &self.fine_stack, &self.matching)
            .map_err(|e| fail(&e))?;
        drop(coarse.scores);
        drop(coarse.probabilities);
        let corrs: Vec<Correspondence> = fine
            .iter()
            .map(|f| Correspondence { point: self.model.points[f.point], pixel: f.location })
            .collect();
        let k = maps.intrinsics;
        let ransac = RansacConfig {
            inlier_px: self.solver.inlier_px.unwrap_or_else(|| pnp::inlier_threshold_for_width(k.width)),
            max_iterations: self.solver.max_iters,
            confidence: self.solver.confidence,
            seed: mix_key(self.seed, Domain::Ransac, view_id as u64, 0),
        };
        let result = pnp::ransac_pnp(&corrs, &k, &ransac);
        let mut record = QueryPose {
            view_id,
            pose: None,
            failure: None,
            coarse_matches: coarse.matches.len(),
            fine_matches: fine.len(),
            inliers: 0,
            mean_inlier_error_px: None,
            ransac_iterations: 0,
            timing_ms: 0.0,
        };
        match result {
            Ok(r) => {
                record.pose = Some(r.pose);
                record.inliers = r.inliers.len();
                record.mean_inlier_error_px = Some(r.mean_error);
                record.ransac_iterations = r.iterations;
            }
            Err(e) => record.failure = Some(e.to_string()),
        }
        record.timing_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(QueryEstimate {
            record,
            correspondences: fine.iter().map(|f| (f.point, f.location, f.confidence)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSummary {
    pub queries: usize,
    pub succeeded: usize,
}

/// Estimates every query view of the scene against a model directory.
/// Writes `poses.json` and one `correspondences/query_<id>.csv` per view.
pub fn estimate(model_dir: &Path, scene_dir: &Path, config: &RunConfig, out: &Path) -> Result<EstimateSummary> {
    config.validate()?;
    let model = io::load_model(model_dir)?;
    if model.is_empty() {
        return Err(PipelineError::Empty("model has no points".into()));
    }
    let scene = io::load_scene(scene_dir)?;
    let localizer = Localizer::new(&model, &scene, config)?;
    let mut records = Vec::new();
    for view_id in scene.query_ids() {
        let q = localizer.estimate(&scene, view_id)?;
        io::write_correspondences(&out.join("correspondences").join(format!("query_{view_id}.csv")), &q.correspondences)?;
        records.push(q.record);
    }
    let succeeded = records.iter().filter(|r| r.pose.is_some()).count();
    let queries = records.len();
    io::write_json(&out.join(io::POSES_FILE), &io::PosesDoc::new(records))?;
    if succeeded == 0 {
        return Err(PipelineError::Empty("no query pose could be estimated".into()));
    }
    Ok(EstimateSummary { queries, succeeded })
}

pub const METRICS_COLUMNS: [&str; 12] = [
    "view_id",
    "status",
    "translation_cm",
    "rotation_deg",
    "add",
    "add_s",
    "proj2d_px",
    "1cm-1deg",
    "3cm-3deg",
    "5cm-5deg",
    "add(s)-0.1d",
    "proj2d-5px",
];

/// Per-query pose errors and success flags plus a final `all` row holding
/// success rates. Failed queries count as failures at every threshold.
pub fn metrics_table(doc: &io::PosesDoc, scene: &SyntheticScene, symmetric: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut row = |fields: Vec<String>| w.write_record(&fields).map_err(|e| PipelineError::Io(IoError::format(e.to_string())));
    row(METRICS_COLUMNS.iter().map(|c| c.to_string()).collect())?;
    let mut totals = [0usize; 5];
    for q in &doc.queries {
        let gt = scene
            .camera(q.view_id)
            .filter(|_| scene.is_query(q.view_id))
            .ok_or_else(|| PipelineError::Usage(format!("view {} is not a query view of this scene", q.view_id)))?;
        let Some(est) = &q.pose else {
            let mut fields = vec![q.view_id.to_string(), "failed".into()];
            fields.extend(std::iter::repeat_n("inf".to_string(), 5));
            fields.extend(std::iter::repeat_n("0".to_string(), 5));
            row(fields)?;
            continue;
        };
        let e = metrics::pose_errors(est, &gt.pose, &scene.points, &gt.intrinsics, CM_PER_UNIT);
        let flags = [
            metrics::cm_degree_success(est, &gt.pose, 1.0, 1.0, CM_PER_UNIT),
            metrics::cm_degree_success(est, &gt.pose, 3.0, 3.0, CM_PER_UNIT),
            metrics::cm_degree_success(est, &gt.pose, 5.0, 5.0, CM_PER_UNIT),
            metrics::add_metric(est, &gt.pose, &scene.points, scene.diameter(), symmetric).success,
            e.proj2d_px <= metrics::PROJ2D_THRESHOLD_PX,
        ];
        for (t, f) in totals.iter_mut().zip(flags) {
            *t += f as usize;
        }
        let mut fields = vec![q.view_id.to_string(), "ok".into()];
        fields.extend([e.translation_cm, e.rotation_deg, e.add, e.add_s, e.proj2d_px].map(|x| format!("{x:.6}")));
        fields.extend(flags.map(|f| (f as u8).to_string()));
        row(fields)?;
    }
    let n = doc.queries.len().max(1) as f64;
    let ok = doc.queries.iter().filter(|q| q.pose.is_some()).count();
    let mut fields = vec!["all".to_string(), format!("{ok}/{}", doc.queries.len())];
    fields.extend(std::iter::repeat_n(String::new(), 5));
    fields.extend(totals.map(|t| format!("{:.4}", t as f64 / n)));
    row(fields)?;
    let bytes = w.into_inner().map_err(|e| PipelineError::Io(IoError::format(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| PipelineError::Io(IoError::format(e.to_string())))
}

/// Reads `poses.json` and writes `metrics.csv`.
pub fn eval(poses: &Path, scene_dir: &Path, config: &RunConfig, out: &Path) -> Result<String> {
    let doc = io::load_poses(poses)?;
    let scene = io::load_scene(scene_dir)?;
    let table = metrics_table(&doc, &scene, config.symmetric)?;
    let mut w = io::create(out)?;
    std::io::Write::write_all(&mut w, table.as_bytes()).map_err(IoError::from)?;
    std::io::Write::flush(&mut w).map_err(IoError::from)?;
    Ok(table)
}

/// `synth → reconstruct → estimate → eval` under one output directory.
pub fn pipeline(config: &RunConfig, out: &Path) -> Result<String> {
    let scene_dir = out.join("scene");
    let model_dir = out.join("model");
    let estimate_dir = out.join("estimate");
    synth(config, &scene_dir)?;
    reconstruct(&scene_dir, config, &model_dir)?;
    estimate(&model_dir, &scene_dir, config, &estimate_dir)?;
    eval(&estimate_dir.join(io::POSES_FILE), &scene_dir, config, &out.join(io::METRICS_FILE))
}
