//! Pose from a plane-to-image homography, for coplanar model points.

use nalgebra::{Matrix3, SMatrix, Vector3};

use super::{nearest_rotation, PnPError};
use super::epnp::ControlFrame;
use crate::geometry::SE3Pose;

/// Similarity normalizing 2D points to zero mean and mean norm √2.
fn normalizer(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let mean_dist = pts.iter().map(|&(x, y)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Normalized DLT homography mapping `src` onto `dst`.
pub(crate) fn homography(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Matrix3<f64>> {
    let ts = normalizer(src);
    let td = normalizer(dst);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (&s, &d) in src.iter().zip(dst) {
        let (a, b) = apply(&ts, s);
        let (x, y) = apply(&td, d);
        let r1 = SMatrix::<f64, 9, 1>::from_column_slice(&[a, b, 1.0, 0.0, 0.0, 0.0, -x * a, -x * b, -x]);
        let r2 = SMatrix::<f64, 9, 1>::from_column_slice(&[0.0, 0.0, 0.0, a, b, 1.0, -y * a, -y * b, -y]);
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    td.try_inverse().map(|ti| ti * hn * ts)
}

/// Pose of coplanar points spanning the first two principal axes of `frame`.
pub(crate) fn solve(
    points: &[Vector3<f64>],
    normalized: &[(f64, f64)],
    frame: &ControlFrame,
) -> Result<SE3Pose, PnPError> {
    let c = frame.control[0];
    let e1 = frame.axes.column(0).into_owned();
    let e2 = frame.axes.column(1).into_owned();
    let basis = Matrix3::from_columns(&[e1, e2, e1.cross(&e2)]);
    let plane: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            let q = basis.transpose() * (p - c);
            (q.x, q.y)
        })
        .collect();
    let h = homography(&plane, normalized).ok_or(PnPError::Degenerate("homography is singular"))?;
    let (h1, h2, h3) = (h.column(0), h.column(1), h.column(2));
    let mut lambda = 0.5 * (h1.norm() + h2.norm());
    if !(lambda > 0.0) {
        return Err(PnPError::Degenerate("homography is singular"));
    }
    // The plane origin is a model point centroid and must be in front.
    if h3.z < 0.0 {
        lambda = -lambda;
    }
    let r1 = h1 / lambda;
    let r2 = h2 / lambda;
    let r_plane = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let t_plane = h3 / lambda;
    let r = r_plane * basis.transpose();
    let t = t_plane - r * c;
    Ok(SE3Pose::from_rotation(nalgebra::Rotation3::from_matrix_unchecked(r), t))
}
