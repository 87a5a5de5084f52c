//! Camera pose from 2D-3D correspondences: EPnP with a homography fallback
//! for planar point sets, RANSAC, and Levenberg-Marquardt polishing.

mod epnp;
mod p3p;
mod planar;

use nalgebra::{Matrix2x6, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use rand::seq::index;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel, SE3Pose};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PnPError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("no pose with at least 4 inliers (best had {best_inliers})")]
    NoConsensus { best_inliers: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point: Vector3<f64>,
    pub pixel: Pixel,
}

/// Relative principal spread below which points count as coplanar.
const PLANAR_RATIO: f64 = 1e-4;
/// Relative spread below which points count as collinear.
const COLLINEAR_RATIO: f64 = 1e-7;
const MINIMAL_POLISH_ITERATIONS: usize = 10;

/// Closest rotation in Frobenius norm.
pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// Rigid transform with `cam ≈ R·world + t` in the least-squares sense.
pub(crate) fn kabsch(world: &[Vector3<f64>], cam: &[Vector3<f64>]) -> Option<SE3Pose> {
    let n = world.len() as f64;
    let cw = world.iter().sum::<Vector3<f64>>() / n;
    let cc = cam.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(cam) {
        h += (c - cc) * (w - cw).transpose();
    }
    if !h.iter().all(|x| x.is_finite()) {
        return None;
    }
    let r = nearest_rotation(&h);
    let t = cc - r * cw;
    Some(SE3Pose::from_rotation(Rotation3::from_matrix_unchecked(r), t))
}

/// Pixel error of each correspondence; infinite behind the camera.
pub fn reprojection_errors(pose: &SE3Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> Vec<f64> {
    corrs
        .iter()
        .map(|c| {
            let pc = pose.transform_point(&c.point);
            if !(pc.z > 0.0) {
                return f64::INFINITY;
            }
            k.project_camera(&pc).distance(c.pixel)
        })
        .collect()
}

fn sum_squared(pose: &SE3Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    reprojection_errors(pose, corrs, k).iter().map(|e| e * e).sum()
}

/// Candidate poses from at least four correspondences, best first. Every
/// candidate puts all points in front of the camera.
pub fn pnp_minimal(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Vec<SE3Pose>, PnPError> {
    if corrs.len() < 4 {
        return Err(PnPError::TooFewPoints(corrs.len()));
    }
    let points: Vec<Vector3<f64>> = corrs.iter().map(|c| c.point).collect();
    let normalized: Vec<(f64, f64)> = corrs
        .iter()
        .map(|c| {
            let x = k.normalize(c.pixel);
            (x.x, x.y)
        })
        .collect();
    let frame = epnp::control_frame(&points);
    let s = frame.spread;
    if !(s[0] > 0.0) || (s[1] / s[0]).sqrt() < COLLINEAR_RATIO {
        return Err(PnPError::Degenerate("points are collinear"));
    }
    let mut raw = if (s[2] / s[0]).sqrt() < PLANAR_RATIO {
        vec![planar::solve(&points, &normalized, &frame)?]
    } else {
        epnp::solve(&points, &normalized, &frame)?
    };
    // Below six points the EPnP kernel is underdetermined and the β
    // approximations can land in the wrong basin. Three-point solutions on
    // the first four points supply further seeds, and LM makes them exact.
    let polish = corrs.len() < 6;
    if polish {
        let bearings: Vec<Vector3<f64>> = normalized.iter().map(|&(x, y)| Vector3::new(x, y, 1.0).normalize()).collect();
        for skip in 0..4 {
            let idx: Vec<usize> = (0..4).filter(|&i| i != skip).collect();
            raw.extend(p3p::solve(
                [points[idx[0]], points[idx[1]], points[idx[2]]],
                [bearings[idx[0]], bearings[idx[1]], bearings[idx[2]]],
            ));
        }
    }
    let mut scored: Vec<(f64, SE3Pose)> = raw
        .into_iter()
        .map(|p| if polish { polish_pose(&p, corrs, k, MINIMAL_POLISH_ITERATIONS).pose } else { p })
        .map(|p| (sum_squared(&p, corrs, k), p))
        .filter(|(e, _)| e.is_finite())
        .collect();
    if scored.is_empty() {
        return Err(PnPError::Degenerate("no candidate places all points in front of the camera"));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().map(|(_, p)| p).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolishResult {
    pub pose: SE3Pose,
    /// Sums of squared pixel residuals.
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Levenberg-Marquardt on the reprojection error with left perturbations
/// `exp([ω; τ])·T`; only cost-decreasing steps are taken.
pub fn polish_pose(pose: &SE3Pose, corrs: &[Correspondence], k: &CameraIntrinsics, max_iterations: usize) -> PolishResult {
    let mut pose = *pose;
    let mut cost = sum_squared(&pose, corrs, k);
    let initial_cost = cost;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < max_iterations && cost.is_finite() && cost > 0.0 {
        iterations += 1;
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for c in corrs {
            let pc = pose.transform_point(&c.point);
            let px = k.project_camera(&pc);
            let r = Vector2::new(c.pixel.u - px.u, c.pixel.v - px.v);
            let jp = k.projection_jacobian(&pc);
            let mut dpc = nalgebra::Matrix3x6::zeros();
            dpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-pc.cross_matrix()));
            dpc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j: Matrix2x6<f64> = -(jp * dpc);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = pose.perturb_left(&delta);
            let c = sum_squared(&cand, corrs, k);
            if c < cost {
                let rel = (cost - c) / cost;
                pose = cand;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    PolishResult { pose, initial_cost, final_cost: cost, iterations }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub inlier_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { inlier_px: 3.0, max_iterations: 10000, confidence: 0.99, seed: 0 }
    }
}

/// Inlier threshold scaled from 3 px at a 512-pixel-wide image.
pub fn inlier_threshold_for_width(width: u32) -> f64 {
    3.0 * width as f64 / 512.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnPResult {
    pub pose: SE3Pose,
    pub inliers: Vec<usize>,
    /// Mean inlier reprojection error in pixels.
    pub mean_error: f64,
    pub iterations: usize,
}

fn inliers_of(pose: &SE3Pose, corrs: &[Correspondence], k: &CameraIntrinsics, thr: f64) -> (Vec<usize>, f64) {
    let errs = reprojection_errors(pose, corrs, k);
    let idx: Vec<usize> = (0..corrs.len()).filter(|&i| errs[i] <= thr).collect();
    let sum = idx.iter().map(|&i| errs[i]).sum();
    (idx, sum)
}

fn subset(corrs: &[Correspondence], idx: &[usize]) -> Vec<Correspondence> {
    idx.iter().map(|&i| corrs[i]).collect()
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w4 = inlier_ratio.powi(4);
    if w4 >= 1.0 {
        return 1;
    }
    if w4 <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w4).ln();
    if n.is_finite() { (n.ceil() as usize).clamp(1, cap) } else { cap }
}

/// Hypothesize-and-verify over seeded 4-point samples, then re-solve and
/// polish on the consensus set.
pub fn ransac_pnp(corrs: &[Correspondence], k: &CameraIntrinsics, config: &RansacConfig) -> Result<PnPResult, PnPError> {
    let n = corrs.len();
    if n < 4 {
        return Err(PnPError::TooFewPoints(n));
    }
    let mut rng = stream(config.seed, Domain::Ransac, n as u64, 0);
    let mut best: Option<(usize, f64, SE3Pose)> = None;
    let mut needed = config.max_iterations;
    let mut iterations = 0;
    while iterations < needed.min(config.max_iterations) {
        iterations += 1;
        let sample = subset(corrs, &index::sample(&mut rng, n, 4).into_vec());
        let Ok(candidates) = pnp_minimal(&sample, k) else {
            continue;
        };
        for pose in candidates {
            let (idx, sum) = inliers_of(&pose, corrs, k, config.inlier_px);
            let better = match &best {
                None => true,
                Some((count, err, _)) => idx.len() > *count || (idx.len() == *count && sum < *err),
            };
            if better {
                needed = required_iterations(idx.len() as f64 / n as f64, config.confidence, config.max_iterations);
                best = Some((idx.len(), sum, pose));
            }
        }
    }
    let Some((count, _, mut pose)) = best.filter(|b| b.0 >= 4) else {
        return Err(PnPError::NoConsensus { best_inliers: best.map_or(0, |b| b.0) });
    };
    let _ = count;

    let (mut inliers, _) = inliers_of(&pose, corrs, k, config.inlier_px);
    for _ in 0..3 {
        let set = subset(corrs, &inliers);
        if let Ok(c) = pnp_minimal(&set, k) {
            if sum_squared(&c[0], &set, k) < sum_squared(&pose, &set, k) {
                pose = c[0];
            }
        }
        pose = polish_pose(&pose, &set, k, 50).pose;
        let (next, _) = inliers_of(&pose, corrs, k, config.inlier_px);
        if next == inliers {
            break;
        }
        inliers = next;
    }
    let (inliers, sum) = inliers_of(&pose, corrs, k, config.inlier_px);
    if inliers.len() < 4 {
        return Err(PnPError::NoConsensus { best_inliers: inliers.len() });
    }
    Ok(PnPResult { pose, mean_error: sum / inliers.len() as f64, inliers, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::raw(600.0, 600.0, 256.0, 256.0, 512, 512)
    }

    fn pose() -> SE3Pose {
        SE3Pose::look_at(Vector3::new(1.0, -3.5, 1.5), Vector3::new(0.05, 0.0, 0.0), Vector3::z()).unwrap()
    }

    fn exact(points: &[Vector3<f64>]) -> Vec<Correspondence> {
        points
            .iter()
            .map(|p| Correspondence { point: *p, pixel: project(&pose(), &k(), p).unwrap() })
            .collect()
    }

    fn rot_err_deg(a: &SE3Pose, b: &SE3Pose) -> f64 {
        let r = a.rotation().inverse() * b.rotation();
        ((r.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn six_exact_points() {
        let pts = [
            Vector3::new(0.3, 0.1, -0.2),
            Vector3::new(-0.4, 0.2, 0.1),
            Vector3::new(0.1, -0.3, 0.3),
            Vector3::new(0.2, 0.4, 0.25),
            Vector3::new(-0.1, -0.2, -0.35),
            Vector3::new(0.45, -0.05, 0.05),
        ];
        let c = pnp_minimal(&exact(&pts), &k()).unwrap();
        assert!(rot_err_deg(&c[0], &pose()).to_radians() < 1e-6);
        let te = (c[0].translation() - pose().translation()).norm();
        assert!(te < 1e-8, "{te} {}", rot_err_deg(&c[0], &pose()));
    }

    #[test]
    fn collinear_and_too_few() {
        let pts: Vec<_> = (0..4).map(|i| Vector3::new(0.1 * i as f64, 0.05 * i as f64, 0.0)).collect();
        assert!(matches!(pnp_minimal(&exact(&pts), &k()), Err(PnPError::Degenerate(_))));
        let three = exact(&[Vector3::zeros(), Vector3::x() * 0.2, Vector3::y() * 0.2]);
        assert_eq!(pnp_minimal(&three, &k()), Err(PnPError::TooFewPoints(3)));
        assert!(matches!(ransac_pnp(&three, &k(), &RansacConfig::default()), Err(PnPError::TooFewPoints(3))));
    }

    #[test]
    fn ransac_exact_inliers() {
        let mut rng = stream(4, Domain::Points, 0, 0);
        let pts: Vec<_> = (0..100)
            .map(|_| Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let r = ransac_pnp(&exact(&pts), &k(), &RansacConfig::default()).unwrap();
        assert_eq!(r.inliers.len(), 100);
        assert!(r.mean_error < 1e-8);
    }

    #[test]
    fn polish_never_increases_cost() {
        let pts: Vec<_> = (0..20)
            .map(|i| {
                let a = i as f64;
                Vector3::new((a * 0.7).sin() * 0.4, (a * 1.3).cos() * 0.4, (a * 0.37).sin() * 0.3)
            })
            .collect();
        let corrs = exact(&pts);
        let start = pose().perturb_left(&Vector6::new(0.01, -0.02, 0.005, 0.03, 0.01, -0.05));
        let r = polish_pose(&start, &corrs, &k(), 50);
        assert!(r.final_cost <= r.initial_cost);
        assert!(r.final_cost < 1e-12, "{}", r.final_cost);
    }

    #[test]
    fn iteration_count_schedule() {
        assert_eq!(required_iterations(1.0, 0.99, 10000), 1);
        assert_eq!(required_iterations(0.0, 0.99, 10000), 10000);
        assert_eq!(required_iterations(0.5, 0.99, 10000), 72);
    }
}
