//! Pinhole projection, rigid transforms and multi-view triangulation.
//!
//! Poses are world→camera everywhere: a pose maps a world point `p` to the
//! camera frame as `R p + t`.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point behind camera (depth {depth:e})")]
    Cheirality { depth: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Sub-pixel image location.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn from_vector(v: Vector2<f64>) -> Self {
        Self { u: v.x, v: v.y }
    }

    pub fn distance(self, other: Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    /// Chebyshev (L∞) distance.
    pub fn chebyshev(self, other: Pixel) -> f64 {
        (self.u - other.u).abs().max((self.v - other.v).abs())
    }

    pub fn is_finite(self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Unvalidated constructor for synthetic test setups where the principal
    /// point may sit on the image corner.
    pub const fn raw(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    /// Normalized image coordinates of a pixel.
    pub fn normalize(&self, px: Pixel) -> Vector2<f64> {
        Vector2::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point without a cheirality check.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Pixel {
        Pixel::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// 2×3 derivative of the projection of a camera-frame point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

/// Rigid world→camera transform.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct SE3Pose {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix, checking `RᵀR = I` and `det R = 1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !ortho.is_finite() || ortho > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation not orthonormal (|RᵀR - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant {det} != 1"
            )));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Pose from an axis-angle vector and translation.
    pub fn from_axis_angle(omega: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::from_rotation(Rotation3::new(omega), translation)
    }

    /// World→camera pose of a camera at `center` looking at `target`.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = target - center;
        if z.norm() == 0.0 {
            return Err(GeometryError::Degenerate("camera at look-at target".into()));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(GeometryError::Degenerate("up vector parallel to view axis".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = Rotation3::from_matrix_unchecked(r);
        Ok(Self {
            rotation,
            translation: -(rotation * center),
        })
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// `self · other`: applies `other` first.
    pub fn compose(&self, other: &SE3Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Optical axis (+z of the camera) expressed in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.inverse() * Vector3::z()
    }

    /// Left-multiplies by `exp(delta)` where `delta = [ω; τ]`.
    pub fn perturb_left(&self, delta: &nalgebra::Vector6<f64>) -> Self {
        let dr = Rotation3::new(Vector3::new(delta[0], delta[1], delta[2]));
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        let rotation = dr * self.rotation;
        Self {
            rotation: Rotation3::from_matrix(rotation.matrix()),
            translation: dr * self.translation + dt,
        }
    }

    pub fn matrix3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major homogeneous 4×4 matrix.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = self.rotation.matrix();
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidPose(
                "last row of homogeneous matrix must be [0, 0, 0, 1]".into(),
            ));
        }
        let r = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        Self::new(r, Vector3::new(m[0][3], m[1][3], m[2][3]))
    }
}

impl std::ops::Mul for SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: SE3Pose) -> SE3Pose {
        self.compose(&rhs)
    }
}

/// Numerical thresholds for cheirality and conditioning checks.
impl From<SE3Pose> for [[f64; 4]; 4] {
    fn from(p: SE3Pose) -> Self {
        p.to_matrix4()
    }
}

impl TryFrom<[[f64; 4]; 4]> for SE3Pose {
    type Error = GeometryError;

    fn try_from(m: [[f64; 4]; 4]) -> Result<Self> {
        Self::from_matrix4(&m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryTolerances {
    pub min_depth: f64,
    pub max_condition: f64,
}

impl Default for GeometryTolerances {
    fn default() -> Self {
        Self {
            min_depth: 1e-8,
            max_condition: 1e12,
        }
    }
}

/// Projects a world point through `pose` and `k`.
pub fn project(pose: &SE3Pose, k: &CameraIntrinsics, p_world: &Vector3<f64>) -> Result<Pixel> {
    let pc = pose.transform_point(p_world);
    if !(pc.z > GeometryTolerances::default().min_depth) {
        return Err(GeometryError::Cheirality { depth: pc.z });
    }
    Ok(k.project_camera(&pc))
}

/// Lifts a pixel at `depth` into the camera frame.
pub fn backproject(px: Pixel, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(GeometryError::Domain(format!(
            "backprojection depth must be positive, got {depth}"
        )));
    }
    Ok(Vector3::new(
        (px.u - k.cx) * depth / k.fx,
        (px.v - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Transform taking reference-camera coordinates to source-camera coordinates.
pub fn relative_pose(xi_r: &SE3Pose, xi_s: &SE3Pose) -> SE3Pose {
    xi_s.compose(&xi_r.inverse())
}

/// One view of a point to be triangulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pose: SE3Pose,
    pub intrinsics: CameraIntrinsics,
    pub pixel: Pixel,
}

impl Observation {
    pub fn new(pose: SE3Pose, intrinsics: CameraIntrinsics, pixel: Pixel) -> Self {
        Self {
            pose,
            intrinsics,
            pixel,
        }
    }
}

/// Sum of squared pixel residuals of `p` over all observations.
pub fn reprojection_cost(observations: &[Observation], p: &Vector3<f64>) -> f64 {
    observations
        .iter()
        .map(|o| {
            let pc = o.pose.transform_point(p);
            let px = o.intrinsics.project_camera(&pc);
            (px.u - o.pixel.u).powi(2) + (px.v - o.pixel.v).powi(2)
        })
        .sum()
}

pub fn triangulate(observations: &[Observation]) -> Result<Vector3<f64>> {
    triangulate_with(observations, &GeometryTolerances::default())
}

/// Multi-view DLT followed by one Gauss-Newton step on reprojection error.
///
/// The problem is expressed relative to the centroid of the camera centers so
/// the result is equivariant under a rigid change of world frame.
pub fn triangulate_with(observations: &[Observation], tol: &GeometryTolerances) -> Result<Vector3<f64>> {
    let n = observations.len();
    if n < 2 {
        return Err(GeometryError::Domain(format!(
            "triangulation needs at least 2 observations, got {n}"
        )));
    }

    let centers: Vec<Vector3<f64>> = observations.iter().map(|o| o.pose.center()).collect();
    let origin = centers.iter().sum::<Vector3<f64>>() / n as f64;
    let spread = centers.iter().map(|c| (c - origin).norm()).sum::<f64>() / n as f64;
    let magnitude = 1.0 + origin.norm();
    if spread <= 1e-12 * magnitude {
        return Err(GeometryError::Degenerate("all camera centers coincide".into()));
    }
    let scale = spread;

    // Pose in the normalized frame X' = (X - origin) / scale, camera coords scaled by 1/scale.
    let local: Vec<(Matrix3<f64>, Vector3<f64>)> = observations
        .iter()
        .map(|o| {
            let r = *o.pose.rotation_matrix();
            let t = (r * origin + o.pose.translation()) / scale;
            (r, t)
        })
        .collect();

    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * n, 4);
    for (i, (o, (r, t))) in observations.iter().zip(&local).enumerate() {
        let x = o.intrinsics.normalize(o.pixel);
        for c in 0..3 {
            a[(2 * i, c)] = x.x * r[(2, c)] - r[(0, c)];
            a[(2 * i + 1, c)] = x.y * r[(2, c)] - r[(1, c)];
        }
        a[(2 * i, 3)] = x.x * t.z - t.x;
        a[(2 * i + 1, 3)] = x.y * t.z - t.y;
    }

    let ata = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let sigma: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
    if !(sigma[2] > 0.0) || sigma[0] / sigma[2] > tol.max_condition {
        return Err(GeometryError::Degenerate(format!(
            "DLT system rank-deficient (condition {:e})",
            sigma[0] / sigma[2]
        )));
    }
    let h = eig.eigenvectors.column(order[3]);
    if h[3].abs() <= 1e-12 * h.norm() {
        return Err(GeometryError::Degenerate("point at infinity (parallel rays)".into()));
    }
    let mut x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    for (r, t) in &local {
        let z = (r * x + t).z;
        if !(z * scale > tol.min_depth) {
            return Err(GeometryError::Cheirality { depth: z * scale });
        }
    }

    // Gauss-Newton polish in the normalized frame; residuals stay in pixels.
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    let mut cost0 = 0.0;
    for (o, (r, t)) in observations.iter().zip(&local) {
        let pc = r * x + t;
        let px = o.intrinsics.project_camera(&pc);
        let res = Vector2::new(px.u - o.pixel.u, px.v - o.pixel.v);
        let j = o.intrinsics.projection_jacobian(&pc) * r;
        jtj += j.transpose() * j;
        jtr += j.transpose() * res;
        cost0 += res.norm_squared();
    }
    let jeig = nalgebra::SymmetricEigen::new(jtj);
    let (lmin, lmax) = jeig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    if !(lmin > 0.0) || (lmax / lmin).sqrt() > tol.max_condition {
        return Err(GeometryError::Degenerate(format!(
            "near-parallel rays (condition {:e})",
            (lmax / lmin.max(0.0)).sqrt()
        )));
    }
    if let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jtr))) {
        let cand = x + step;
        let cost1: f64 = observations
            .iter()
            .zip(&local)
            .map(|(o, (r, t))| {
                let pc = r * cand + t;
                if pc.z <= 0.0 {
                    return f64::INFINITY;
                }
                let px = o.intrinsics.project_camera(&pc);
                (px.u - o.pixel.u).powi(2) + (px.v - o.pixel.v).powi(2)
            })
            .sum();
        if cost1 <= cost0 {
            x = cand;
        }
    }

    let world = x * scale + origin;
    for o in observations {
        let depth = o.pose.transform_point(&world).z;
        if !(depth > tol.min_depth) {
            return Err(GeometryError::Cheirality { depth });
        }
    }
    Ok(world)
}
