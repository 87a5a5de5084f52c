//! Pose and point-cloud accuracy metrics.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, SE3Pose};

/// Geodesic angle between two rotations, degrees in `[0, 180]`.
pub fn rotation_error_deg(est: &SE3Pose, gt: &SE3Pose) -> f64 {
    let r = est.rotation_matrix().transpose() * gt.rotation_matrix();
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Distance between the translations of two world-to-camera poses, scene units.
pub fn translation_error(est: &SE3Pose, gt: &SE3Pose) -> f64 {
    (est.translation() - gt.translation()).norm()
}

/// Both errors within their thresholds; `cm_per_unit` converts scene units.
pub fn cm_degree_success(est: &SE3Pose, gt: &SE3Pose, t_cm: f64, t_deg: f64, cm_per_unit: f64) -> bool {
    translation_error(est, gt) * cm_per_unit <= t_cm && rotation_error_deg(est, gt) <= t_deg
}

/// Mean distance between corresponding transformed model points.
pub fn add(est: &SE3Pose, gt: &SE3Pose, points: &[Vector3<f64>]) -> f64 {
    let sum: f64 = points
        .iter()
        .map(|p| (est.transform_point(p) - gt.transform_point(p)).norm())
        .sum();
    sum / points.len() as f64
}

fn nearest_distance(p: &Vector3<f64>, cloud: &[Vector3<f64>]) -> f64 {
    cloud.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)
}

/// Mean distance from each estimated point to the nearest ground-truth point.
pub fn add_s(est: &SE3Pose, gt: &SE3Pose, points: &[Vector3<f64>]) -> f64 {
    let target: Vec<Vector3<f64>> = points.iter().map(|p| gt.transform_point(p)).collect();
    let sum: f64 = points
        .par_iter()
        .map(|p| nearest_distance(&est.transform_point(p), &target))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / points.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdedError {
    pub value: f64,
    pub success: bool,
}

/// ADD, or ADD-S for symmetric objects, succeeding at a tenth of the diameter.
pub fn add_metric(est: &SE3Pose, gt: &SE3Pose, points: &[Vector3<f64>], diameter: f64, symmetric: bool) -> ThresholdedError {
    let value = if symmetric { add_s(est, gt, points) } else { add(est, gt, points) };
    ThresholdedError { value, success: value <= 0.1 * diameter }
}

pub const PROJ2D_THRESHOLD_PX: f64 = 5.0;

/// Mean image distance between model points projected by both poses.
/// A point behind either camera makes the error infinite.
pub fn proj2d(est: &SE3Pose, gt: &SE3Pose, points: &[Vector3<f64>], k: &CameraIntrinsics, threshold_px: f64) -> ThresholdedError {
    let mut sum = 0.0;
    for p in points {
        let (a, b) = (est.transform_point(p), gt.transform_point(p));
        if !(a.z > 0.0 && b.z > 0.0) {
            return ThresholdedError { value: f64::INFINITY, success: false };
        }
        sum += k.project_camera(&a).distance(k.project_camera(&b));
    }
    let value = sum / points.len() as f64;
    ThresholdedError { value, success: value <= threshold_px }
}

/// Fraction of reconstructed points whose nearest ground-truth point is
/// within each threshold.
pub fn point_cloud_accuracy(recon: &[Vector3<f64>], gt: &[Vector3<f64>], thresholds: &[f64]) -> Vec<f64> {
    if recon.is_empty() || gt.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let nn: Vec<f64> = recon.par_iter().map(|p| nearest_distance(p, gt)).collect();
    thresholds
        .iter()
        .map(|&t| nn.iter().filter(|&&d| d <= t).count() as f64 / recon.len() as f64)
        .collect()
}

/// Per-query error summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseErrors {
    pub translation: f64,
    pub translation_cm: f64,
    pub rotation_deg: f64,
    pub add: f64,
    pub add_s: f64,
    pub proj2d_px: f64,
}

pub fn pose_errors(
    est: &SE3Pose,
    gt: &SE3Pose,
    points: &[Vector3<f64>],
    k: &CameraIntrinsics,
    cm_per_unit: f64,
) -> PoseErrors {
    let t = translation_error(est, gt);
    PoseErrors {
        translation: t,
        translation_cm: t * cm_per_unit,
        rotation_deg: rotation_error_deg(est, gt),
        add: add(est, gt, points),
        add_s: add_s(est, gt, points),
        proj2d_px: proj2d(est, gt, points, k, PROJ2D_THRESHOLD_PX).value,
    }
}
