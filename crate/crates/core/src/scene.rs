//! Deterministic synthetic object scenes.
//!
//! A scene is a set of 3D points sampled on a union of ellipsoid shells inside
//! the unit object box, each carrying random unit-norm coarse and fine
//! descriptors, seen from cameras on a viewing hemisphere. It stands in for
//! real images and a learned matcher: observations, grid cells and sub-pixel
//! "fine" locations are all derived from it.
//!
//! Scene units: 1 unit = 1 object diameter = 10 cm.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{normalize_in_place, FeatureMatrix};
use crate::geometry::{CameraIntrinsics, Pixel, SE3Pose};
use crate::rng::{stream, Domain};

/// Coarse grid stride in pixels.
pub const GRID_STRIDE: u32 = 8;
/// Half-size of the sub-pixel refinement window (9×9 window → ±4 px).
pub const REFINE_HALF_WINDOW: f64 = 4.0;

/// Centimeters per scene unit.
pub const CM_PER_UNIT: f64 = 10.0;

pub type ViewId = usize;
pub type PointId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("invalid scene argument: {0}")]
    InvalidArgument(String),
    #[error("view {0} does not exist")]
    UnknownView(ViewId),
    #[error("point {point} not visible in view {view}")]
    NotVisible { view: ViewId, point: PointId },
    #[error("could not place {wanted} points visible in two views after {attempts} attempts")]
    Placement { wanted: usize, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Std-dev of the fine location noise, pixels.
    pub fine_noise_sigma: f64,
    /// Norm-scale of additive descriptor noise (per-component σ/√C).
    pub descriptor_noise_sigma: f64,
    pub dropout_rate: f64,
    pub outlier_rate: f64,
}

impl NoiseModel {
    pub const fn zero() -> Self {
        Self {
            fine_noise_sigma: 0.0,
            descriptor_noise_sigma: 0.0,
            dropout_rate: 0.0,
            outlier_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let all = [
            ("fine_noise_sigma", self.fine_noise_sigma),
            ("descriptor_noise_sigma", self.descriptor_noise_sigma),
            ("dropout_rate", self.dropout_rate),
            ("outlier_rate", self.outlier_rate),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SceneError::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.dropout_rate >= 1.0 || self.outlier_rate >= 1.0 {
            return Err(SceneError::InvalidArgument(
                "dropout_rate and outlier_rate must be < 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub n_points: usize,
    pub n_views: usize,
    pub n_query_views: usize,
    pub coarse_dim: usize,
    pub fine_dim: usize,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseModel,
}

impl SceneParams {
    pub fn new(n_points: usize, n_views: usize, noise: NoiseModel) -> Self {
        Self {
            n_points,
            n_views,
            noise,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.n_points < 8 {
            return Err(SceneError::InvalidArgument(format!(
                "n_points must be >= 8, got {}",
                self.n_points
            )));
        }
        if self.n_views < 2 {
            return Err(SceneError::InvalidArgument(format!(
                "n_views must be >= 2, got {}",
                self.n_views
            )));
        }
        if self.coarse_dim == 0 || self.fine_dim == 0 {
            return Err(SceneError::InvalidArgument("descriptor dims must be positive".into()));
        }
        if self.intrinsics.width % GRID_STRIDE != 0 || self.intrinsics.height % GRID_STRIDE != 0 {
            return Err(SceneError::InvalidArgument(format!(
                "image size must be a multiple of the grid stride {GRID_STRIDE}"
            )));
        }
        self.intrinsics
            .validate()
            .map_err(|e| SceneError::InvalidArgument(e.to_string()))?;
        self.noise.validate()
    }
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            n_points: 2000,
            n_views: 30,
            n_query_views: 20,
            coarse_dim: 128,
            fine_dim: 64,
            intrinsics: CameraIntrinsics::raw(600.0, 600.0, 256.0, 256.0, 512, 512),
            noise: NoiseModel::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraView {
    pub pose: SE3Pose,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub params: SceneParams,
    pub points: Vec<Vector3<f64>>,
    pub coarse_descriptors: FeatureMatrix,
    pub fine_descriptors: FeatureMatrix,
    /// Reference views, ids `0..views.len()`.
    pub views: Vec<CameraView>,
    /// Held-out views, ids `views.len()..`.
    pub query_views: Vec<CameraView>,
}

/// Coarse grid cell index; its center is `stride·i + stride/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCell {
    pub x: u32,
    pub y: u32,
}

impl GridCell {
    pub fn of(px: Pixel) -> Self {
        Self {
            x: (px.u / GRID_STRIDE as f64).floor() as u32,
            y: (px.v / GRID_STRIDE as f64).floor() as u32,
        }
    }

    /// Cell containing a pixel, `None` outside `[0,w)×[0,h)`.
    pub fn checked(px: Pixel, k: &CameraIntrinsics) -> Option<Self> {
        k.contains(px).then(|| Self::of(px))
    }

    pub fn center(self) -> Pixel {
        let half = GRID_STRIDE as f64 / 2.0;
        Pixel::new(
            (self.x * GRID_STRIDE) as f64 + half,
            (self.y * GRID_STRIDE) as f64 + half,
        )
    }

    /// Flattened row-major index on a `cols`-wide grid.
    pub fn flat(self, cols: u32) -> usize {
        (self.y * cols + self.x) as usize
    }
}

/// Quantizes a pixel to the center of its stride-8 cell.
pub fn quantize(px: Pixel) -> Pixel {
    GridCell::of(px).center()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedPoint {
    pub point_id: PointId,
    pub pixel: Pixel,
    pub cell: GridCell,
    pub depth: f64,
}

/// Per-view visibility and quantization of all scene points.
///
/// Observed descriptors are not stored; they are regenerated on demand by
/// [`SyntheticScene::observed_descriptor`] from a keyed stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewObservations {
    pub view_id: ViewId,
    /// Visible points sorted by id.
    pub points: Vec<ObservedPoint>,
    /// In-frustum points (before dropout).
    pub in_frustum: usize,
    owners: BTreeMap<GridCell, PointId>,
    index: HashMap<PointId, usize>,
}

impl ViewObservations {
    pub fn get(&self, point: PointId) -> Option<&ObservedPoint> {
        self.index.get(&point).map(|&i| &self.points[i])
    }

    pub fn is_visible(&self, point: PointId) -> bool {
        self.index.contains_key(&point)
    }

    /// The point whose descriptor occupies `cell`: the nearest visible point, ties to the lowest id.
    pub fn owner(&self, cell: GridCell) -> Option<PointId> {
        self.owners.get(&cell).copied()
    }

    pub fn owned_cells(&self) -> impl Iterator<Item = (GridCell, PointId)> + '_ {
        self.owners.iter().map(|(c, p)| (*c, *p))
    }

    pub fn owns_cell(&self, point: PointId) -> bool {
        self.get(point)
            .is_some_and(|o| self.owners.get(&o.cell) == Some(&point))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorLevel {
    Coarse,
    Fine,
}

struct Shell {
    center: Vector3<f64>,
    radii: Vector3<f64>,
    rotation: Rotation3<f64>,
}

fn random_rotation<R: Rng>(rng: &mut R) -> Rotation3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let q = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

pub(crate) fn gaussian_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize_in_place(&mut v) {
            return v;
        }
    }
}

fn hemisphere_camera(
    seed: u64,
    domain: Domain,
    index: usize,
    k: CameraIntrinsics,
) -> CameraView {
    let mut rng = stream(seed, domain, index as u64, 0);
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation = rng.random_range(10f64.to_radians()..70f64.to_radians());
    let radius = rng.random_range(3.0..5.0);
    let center = radius
        * Vector3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        );
    let base = SE3Pose::look_at(center, Vector3::zeros(), Vector3::z())
        .expect("hemisphere camera never sits on the vertical axis");
    let axis: Vector3<f64> = Vector3::from_fn(|_, _| rng.sample(StandardNormal)).normalize();
    let angle = rng.random_range(0.0..10f64.to_radians());
    let jitter = Rotation3::new(axis * angle);
    let rotation = jitter * base.rotation();
    let pose = SE3Pose::from_rotation(rotation, -(rotation * center));
    CameraView { pose, intrinsics: k }
}

fn in_frustum(view: &CameraView, p: &Vector3<f64>) -> Option<(Pixel, f64)> {
    let pc = view.pose.transform_point(p);
    if !(pc.z > 1e-8) {
        return None;
    }
    let px = view.intrinsics.project_camera(&pc);
    view.intrinsics.contains(px).then_some((px, pc.z))
}

/// Generates a scene deterministically from `seed`.
pub fn generate_scene(seed: u64, params: SceneParams) -> Result<SyntheticScene, SceneError> {
    params.validate()?;
    let k = params.intrinsics;

    let views: Vec<CameraView> = (0..params.n_views)
        .map(|i| hemisphere_camera(seed, Domain::Cameras, i, k))
        .collect();
    let query_views: Vec<CameraView> = (0..params.n_query_views)
        .map(|i| hemisphere_camera(seed, Domain::QueryCameras, i, k))
        .collect();

    let shells: Vec<Shell> = (0..3)
        .map(|s| {
            let mut rng = stream(seed, Domain::Shapes, s, 0);
            Shell {
                center: Vector3::from_fn(|_, _| rng.random_range(-0.15..0.15)),
                radii: Vector3::from_fn(|_, _| rng.random_range(0.15..0.35)),
                rotation: random_rotation(&mut rng),
            }
        })
        .collect();

    let max_attempts = 100 * params.n_points;
    let mut points = Vec::with_capacity(params.n_points);
    let mut candidate = 0u64;
    while points.len() < params.n_points {
        if candidate as usize >= max_attempts {
            return Err(SceneError::Placement {
                wanted: params.n_points,
                attempts: max_attempts,
            });
        }
        let mut rng = stream(seed, Domain::Points, candidate, 0);
        candidate += 1;
        let shell = &shells[rng.random_range(0..shells.len())];
        let dir: Vector3<f64> = Vector3::from_fn(|_, _| rng.sample(StandardNormal));
        if dir.norm() < 1e-12 {
            continue;
        }
        let local = shell.radii.component_mul(&dir.normalize());
        let p = shell.center + shell.rotation * local;
        if p.iter().any(|c| c.abs() > 0.5) {
            continue;
        }
        let seen = views.iter().filter(|v| in_frustum(v, &p).is_some()).count();
        if seen >= 2 {
            points.push(p);
        }
    }

    let descriptors = |level: u64, dim: usize| {
        let rows: Vec<Vec<f64>> = (0..params.n_points)
            .map(|j| gaussian_unit(&mut stream(seed, Domain::Descriptors, j as u64, level), dim))
            .collect();
        FeatureMatrix::from_rows(dim, &rows)
    };

    Ok(SyntheticScene {
        seed,
        params,
        points,
        coarse_descriptors: descriptors(0, params.coarse_dim),
        fine_descriptors: descriptors(1, params.fine_dim),
        views,
        query_views,
    })
}

impl SyntheticScene {
    pub fn num_cameras(&self) -> usize {
        self.views.len() + self.query_views.len()
    }

    pub fn camera(&self, id: ViewId) -> Option<&CameraView> {
        if id < self.views.len() {
            self.views.get(id)
        } else {
            self.query_views.get(id - self.views.len())
        }
    }

    pub fn is_query(&self, id: ViewId) -> bool {
        id >= self.views.len() && id < self.num_cameras()
    }

    pub fn query_ids(&self) -> std::ops::Range<ViewId> {
        self.views.len()..self.num_cameras()
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.params.noise
    }

    /// Whether `point` survives random dropout in `view`.
    pub fn kept(&self, view: ViewId, point: PointId) -> bool {
        let rate = self.params.noise.dropout_rate;
        if rate <= 0.0 {
            return true;
        }
        let u: f64 = stream(self.seed, Domain::Dropout, view as u64, point as u64).random();
        u >= rate
    }

    /// Point descriptor plus per-observation noise, renormalized.
    /// Exactly the point descriptor when the noise level is zero.
    pub fn observed_descriptor(&self, view: ViewId, point: PointId, level: DescriptorLevel) -> Vec<f64> {
        let (base, tag) = match level {
            DescriptorLevel::Coarse => (self.coarse_descriptors.row(point), 0u64),
            DescriptorLevel::Fine => (self.fine_descriptors.row(point), 1u64),
        };
        let sigma = self.params.noise.descriptor_noise_sigma;
        if sigma == 0.0 {
            return base.to_vec();
        }
        let key = ((view as u64) << 1) | tag;
        let mut rng = stream(self.seed, Domain::DescriptorNoise, key, point as u64);
        let per = sigma / (base.len() as f64).sqrt();
        let mut out: Vec<f64> = base
            .iter()
            .map(|x| x + per * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if !normalize_in_place(&mut out) {
            return base.to_vec();
        }
        out
    }

    /// Declared object diameter in scene units.
    pub fn diameter(&self) -> f64 {
        1.0
    }
}

/// Projects and culls every point in one view, applying dropout.
pub fn render_observations(scene: &SyntheticScene, view_id: ViewId) -> Result<ViewObservations, SceneError> {
    let view = scene.camera(view_id).ok_or(SceneError::UnknownView(view_id))?;
    let mut points = Vec::new();
    let mut in_frustum_count = 0;
    for (j, p) in scene.points.iter().enumerate() {
        let Some((pixel, depth)) = in_frustum(view, p) else {
            continue;
        };
        in_frustum_count += 1;
        if !scene.kept(view_id, j) {
            continue;
        }
        points.push(ObservedPoint {
            point_id: j,
            pixel,
            cell: GridCell::of(pixel),
            depth,
        });
    }
    let mut owners: BTreeMap<GridCell, PointId> = BTreeMap::new();
    let mut owner_depth: HashMap<GridCell, f64> = HashMap::new();
    for o in &points {
        match owner_depth.get(&o.cell) {
            Some(&d) if d <= o.depth => {}
            _ => {
                owner_depth.insert(o.cell, o.depth);
                owners.insert(o.cell, o.point_id);
            }
        }
    }
    let index = points.iter().enumerate().map(|(i, o)| (o.point_id, i)).collect();
    Ok(ViewObservations {
        view_id,
        points,
        in_frustum: in_frustum_count,
        owners,
        index,
    })
}

/// Renders every camera (reference and query) in parallel.
pub fn render_all(scene: &SyntheticScene) -> Vec<ViewObservations> {
    (0..scene.num_cameras())
        .into_par_iter()
        .map(|v| render_observations(scene, v).expect("view id in range"))
        .collect()
}

/// Ground-truth sub-pixel location: true projection plus Gaussian noise,
/// clamped to the refinement window around the cell center.
pub fn oracle_fine_location(
    scene: &SyntheticScene,
    obs: &ViewObservations,
    point: PointId,
) -> Result<Pixel, SceneError> {
    let o = obs.get(point).ok_or(SceneError::NotVisible {
        view: obs.view_id,
        point,
    })?;
    let sigma = scene.params.noise.fine_noise_sigma;
    if sigma == 0.0 {
        return Ok(o.pixel);
    }
    let mut rng = stream(scene.seed, Domain::FineNoise, obs.view_id as u64, point as u64);
    let du: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
    let dv: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
    let c = o.cell.center();
    Ok(Pixel::new(
        (o.pixel.u + du).clamp(c.u - REFINE_HALF_WINDOW, c.u + REFINE_HALF_WINDOW),
        (o.pixel.v + dv).clamp(c.v - REFINE_HALF_WINDOW, c.v + REFINE_HALF_WINDOW),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: NoiseModel) -> SyntheticScene {
        let params = SceneParams {
            n_points: 300,
            n_views: 10,
            n_query_views: 3,
            noise,
            ..SceneParams::default()
        };
        generate_scene(7, params).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let p = SceneParams::new(100, 10, NoiseModel::zero());
        let a = generate_scene(1, p).unwrap();
        let b = generate_scene(1, p).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(2, p).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            generate_scene(1, SceneParams::new(7, 10, NoiseModel::zero())),
            Err(SceneError::InvalidArgument(_))
        ));
        assert!(matches!(
            generate_scene(1, SceneParams::new(100, 1, NoiseModel::zero())),
            Err(SceneError::InvalidArgument(_))
        ));
        let noise = NoiseModel {
            dropout_rate: 1.0,
            ..NoiseModel::zero()
        };
        assert!(generate_scene(1, SceneParams::new(100, 4, noise)).is_err());
    }

    #[test]
    fn points_inside_box_and_seen_twice() {
        let scene = small(NoiseModel::zero());
        for p in &scene.points {
            assert!(p.iter().all(|c| c.abs() <= 0.5));
            let seen = scene.views.iter().filter(|v| in_frustum(v, p).is_some()).count();
            assert!(seen >= 2);
        }
    }

    #[test]
    fn descriptors_unit_norm() {
        let scene = small(NoiseModel::zero());
        assert!(scene.coarse_descriptors.max_row_norm_error() < 1e-12);
        assert!(scene.fine_descriptors.max_row_norm_error() < 1e-12);
        let noisy = small(NoiseModel {
            descriptor_noise_sigma: 0.3,
            ..NoiseModel::zero()
        });
        let d = noisy.observed_descriptor(2, 5, DescriptorLevel::Coarse);
        assert!((crate::features::norm(&d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_descriptors_are_exact() {
        let scene = small(NoiseModel::zero());
        for j in [0, 17, 299] {
            assert_eq!(
                scene.observed_descriptor(3, j, DescriptorLevel::Coarse),
                scene.coarse_descriptors.row(j)
            );
            assert_eq!(
                scene.observed_descriptor(3, j, DescriptorLevel::Fine),
                scene.fine_descriptors.row(j)
            );
        }
    }

    #[test]
    fn render_pixels_inside_image_and_cells_centered() {
        let scene = small(NoiseModel {
            dropout_rate: 0.2,
            ..NoiseModel::zero()
        });
        for v in 0..scene.num_cameras() {
            let obs = render_observations(&scene, v).unwrap();
            for o in &obs.points {
                assert!(scene.params.intrinsics.contains(o.pixel));
                let c = o.cell.center();
                assert_eq!(c.u.rem_euclid(8.0), 4.0);
                assert_eq!(c.v.rem_euclid(8.0), 4.0);
                assert_eq!(c, quantize(o.pixel));
            }
        }
        assert!(render_observations(&scene, scene.num_cameras()).is_err());
    }

    #[test]
    fn owner_is_nearest_point() {
        let scene = small(NoiseModel::zero());
        let obs = render_observations(&scene, 0).unwrap();
        for (cell, owner) in obs.owned_cells() {
            let d_owner = obs.get(owner).unwrap().depth;
            for o in obs.points.iter().filter(|o| o.cell == cell) {
                assert!(o.depth >= d_owner);
            }
        }
    }

    #[test]
    fn oracle_fine_location_exact_without_noise() {
        let scene = small(NoiseModel::zero());
        let obs = render_observations(&scene, 1).unwrap();
        let o = obs.points[0];
        assert_eq!(oracle_fine_location(&scene, &obs, o.point_id).unwrap(), o.pixel);
        let hidden = (0..scene.points.len()).find(|j| !obs.is_visible(*j));
        if let Some(j) = hidden {
            assert!(matches!(
                oracle_fine_location(&scene, &obs, j),
                Err(SceneError::NotVisible { .. })
            ));
        }
    }

    #[test]
    fn oracle_fine_location_stays_in_window() {
        let scene = small(NoiseModel {
            fine_noise_sigma: 3.0,
            ..NoiseModel::zero()
        });
        for v in 0..4 {
            let obs = render_observations(&scene, v).unwrap();
            for o in &obs.points {
                let f = oracle_fine_location(&scene, &obs, o.point_id).unwrap();
                assert!(f.chebyshev(o.cell.center()) <= REFINE_HALF_WINDOW);
            }
        }
    }
}
