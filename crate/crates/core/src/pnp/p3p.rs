//! Grunert's three-point solver, used to seed poses from tiny point sets.

use nalgebra::{Matrix4, Vector3};

use super::kabsch;
use crate::geometry::SE3Pose;

/// Real roots of `c[0]·x⁴ + c[1]·x³ + c[2]·x² + c[3]·x + c[4]`.
fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    if !(c[0].abs() > 1e-14 * c.iter().map(|x| x.abs()).fold(0.0, f64::max)) {
        return Vec::new();
    }
    let mut companion = Matrix4::zeros();
    for i in 0..4 {
        companion[(0, i)] = -c[i + 1] / c[0];
    }
    for i in 1..4 {
        companion[(i, i - 1)] = 1.0;
    }
    let poly = |x: f64| (((c[0] * x + c[1]) * x + c[2]) * x + c[3]) * x + c[4];
    let deriv = |x: f64| ((4.0 * c[0] * x + 3.0 * c[1]) * x + 2.0 * c[2]) * x + c[3];
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            // Newton cleans up eigenvalue round-off.
            let mut x = z.re;
            for _ in 0..4 {
                let d = deriv(x);
                if d == 0.0 {
                    break;
                }
                x -= poly(x) / d;
            }
            x
        })
        .filter(|x| x.is_finite())
        .collect()
}

/// Poses consistent with three world points and their unit bearings.
pub(crate) fn solve(world: [Vector3<f64>; 3], bearings: [Vector3<f64>; 3]) -> Vec<SE3Pose> {
    let [j1, j2, j3] = bearings;
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    if !(b2 > 0.0) {
        return Vec::new();
    }
    let (ca, cb, cg) = (j2.dot(&j3), j1.dot(&j3), j1.dot(&j2));
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca - 4.0 * apc * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];
    let mut poses = Vec::new();
    for v in quartic_roots(coeffs) {
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-12 {
            continue;
        }
        let u = ((amc - 1.0) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let q = 1.0 + v * v - 2.0 * v * cb;
        if !(q > 0.0) {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let (s2, s3) = (u * s1, v * s1);
        if !(s2 > 0.0 && s3 > 0.0) {
            continue;
        }
        let cam = [j1 * s1, j2 * s2, j3 * s3];
        if let Some(p) = kabsch(&world, &cam) {
            poses.push(p);
        }
    }
    poses
}
