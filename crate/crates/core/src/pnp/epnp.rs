//! EPnP: the camera-frame points are expressed through four control points,
//! whose camera coordinates lie in the null space of a `2n×12` system.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4, DMatrix};

use super::{kabsch, PnPError};
use crate::geometry::SE3Pose;

type Matrix6x10 = SMatrix<f64, 6, 10>;

pub(crate) struct ControlFrame {
    pub control: [Vector3<f64>; 4],
    /// Eigenvalues of the centered scatter, descending.
    pub spread: Vector3<f64>,
    pub axes: Matrix3<f64>,
}

/// Centroid plus the principal axes scaled by their standard deviation.
pub(crate) fn control_frame(points: &[Vector3<f64>]) -> ControlFrame {
    let n = points.len() as f64;
    let c0 = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - c0;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spread = Vector3::from_fn(|i, _| eig.eigenvalues[order[i]].max(0.0));
    let axes = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    let mut control = [c0; 4];
    for i in 0..3 {
        control[i + 1] = c0 + (spread[i] / n).sqrt() * axes.column(i);
    }
    ControlFrame { control, spread, axes }
}

fn barycentric(points: &[Vector3<f64>], control: &[Vector3<f64>; 4]) -> Result<Vec<Vector4<f64>>, PnPError> {
    let basis = Matrix3::from_columns(&[
        control[1] - control[0],
        control[2] - control[0],
        control[3] - control[0],
    ]);
    let inv = basis.try_inverse().ok_or(PnPError::Degenerate("control points are coplanar"))?;
    Ok(points
        .iter()
        .map(|p| {
            let a = inv * (p - control[0]);
            Vector4::new(1.0 - a.sum(), a.x, a.y, a.z)
        })
        .collect())
}

/// Row of `L` for the control-point pair `(a, b)`: coefficients of
/// `[β₁², β₁β₂, β₂², β₁β₃, β₂β₃, β₃², β₁β₄, β₂β₄, β₃β₄, β₄²]`.
fn l_row(v: &[SVector<f64, 12>; 4], a: usize, b: usize) -> SVector<f64, 10> {
    let d: [Vector3<f64>; 4] = std::array::from_fn(|k| {
        Vector3::new(
            v[k][3 * a] - v[k][3 * b],
            v[k][3 * a + 1] - v[k][3 * b + 1],
            v[k][3 * a + 2] - v[k][3 * b + 2],
        )
    });
    SVector::<f64, 10>::from_column_slice(&[
        d[0].dot(&d[0]),
        2.0 * d[0].dot(&d[1]),
        d[1].dot(&d[1]),
        2.0 * d[0].dot(&d[2]),
        2.0 * d[1].dot(&d[2]),
        d[2].dot(&d[2]),
        2.0 * d[0].dot(&d[3]),
        2.0 * d[1].dot(&d[3]),
        2.0 * d[2].dot(&d[3]),
        d[3].dot(&d[3]),
    ])
}

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().svd(true, true).solve(b, 1e-14).ok()
}

fn sub_system(l: &Matrix6x10, cols: &[usize], rho: &SVector<f64, 6>) -> Option<Vec<f64>> {
    let a = DMatrix::from_fn(6, cols.len(), |r, c| l[(r, cols[c])]);
    let b = DMatrix::from_column_slice(6, 1, rho.as_slice());
    least_squares(&a, &b).map(|x| x.iter().copied().collect())
}

fn betas_approx_1(l: &Matrix6x10, rho: &SVector<f64, 6>) -> Option<Vector4<f64>> {
    let b = sub_system(l, &[0, 1, 3, 6], rho)?;
    let s = if b[0] < 0.0 { -1.0 } else { 1.0 };
    let b0 = (s * b[0]).sqrt();
    if b0 == 0.0 {
        return None;
    }
    Some(Vector4::new(b0, s * b[1] / b0, s * b[2] / b0, s * b[3] / b0))
}

fn betas_approx_2(l: &Matrix6x10, rho: &SVector<f64, 6>) -> Option<Vector4<f64>> {
    let b = sub_system(l, &[0, 1, 2], rho)?;
    let (mut b0, b1) = if b[0] < 0.0 {
        ((-b[0]).sqrt(), if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 })
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    Some(Vector4::new(b0, b1, 0.0, 0.0))
}

fn betas_approx_3(l: &Matrix6x10, rho: &SVector<f64, 6>) -> Option<Vector4<f64>> {
    let b = sub_system(l, &[0, 1, 2, 3, 4], rho)?;
    let (mut b0, b1) = if b[0] < 0.0 {
        ((-b[0]).sqrt(), if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 })
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    if b0 == 0.0 {
        return None;
    }
    Some(Vector4::new(b0, b1, b[3] / b0, 0.0))
}

fn beta_products(b: &Vector4<f64>) -> SVector<f64, 10> {
    SVector::<f64, 10>::from_column_slice(&[
        b[0] * b[0],
        b[0] * b[1],
        b[1] * b[1],
        b[0] * b[2],
        b[1] * b[2],
        b[2] * b[2],
        b[0] * b[3],
        b[1] * b[3],
        b[2] * b[3],
        b[3] * b[3],
    ])
}

fn gauss_newton(l: &Matrix6x10, rho: &SVector<f64, 6>, mut beta: Vector4<f64>) -> Vector4<f64> {
    for _ in 0..5 {
        let mut a = DMatrix::zeros(6, 4);
        let mut r = DMatrix::zeros(6, 1);
        let b = &beta;
        for i in 0..6 {
            let l = l.row(i);
            a[(i, 0)] = 2.0 * l[0] * b[0] + l[1] * b[1] + l[3] * b[2] + l[6] * b[3];
            a[(i, 1)] = l[1] * b[0] + 2.0 * l[2] * b[1] + l[4] * b[2] + l[7] * b[3];
            a[(i, 2)] = l[3] * b[0] + l[4] * b[1] + 2.0 * l[5] * b[2] + l[8] * b[3];
            a[(i, 3)] = l[6] * b[0] + l[7] * b[1] + l[8] * b[2] + 2.0 * l[9] * b[3];
            r[(i, 0)] = rho[i] - l.dot(&beta_products(b).transpose());
        }
        match least_squares(&a, &r) {
            Some(d) => beta += Vector4::new(d[0], d[1], d[2], d[3]),
            None => break,
        }
    }
    beta
}

/// Camera-frame points for a given `β`, with the global sign chosen so that
/// most points have positive depth.
fn camera_points(
    v: &[SVector<f64, 12>; 4],
    beta: &Vector4<f64>,
    alphas: &[Vector4<f64>],
) -> Vec<Vector3<f64>> {
    let x: SVector<f64, 12> = v[0] * beta[0] + v[1] * beta[1] + v[2] * beta[2] + v[3] * beta[3];
    let ccam: [Vector3<f64>; 4] = std::array::from_fn(|i| Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]));
    let mut pcs: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| ccam[0] * a[0] + ccam[1] * a[1] + ccam[2] * a[2] + ccam[3] * a[3])
        .collect();
    let negative = pcs.iter().filter(|p| p.z < 0.0).count();
    if 2 * negative > pcs.len() {
        pcs.iter_mut().for_each(|p| *p = -*p);
    }
    pcs
}

/// EPnP on non-planar points and normalized image coordinates.
/// Returns one pose per β approximation that yields a valid rotation.
pub(crate) fn solve(points: &[Vector3<f64>], normalized: &[(f64, f64)], frame: &ControlFrame) -> Result<Vec<SE3Pose>, PnPError> {
    let alphas = barycentric(points, &frame.control)?;
    let mut mtm = SMatrix::<f64, 12, 12>::zeros();
    for (a, &(x, y)) in alphas.iter().zip(normalized) {
        let mut r1 = SVector::<f64, 12>::zeros();
        let mut r2 = SVector::<f64, 12>::zeros();
        for j in 0..4 {
            r1[3 * j] = a[j];
            r1[3 * j + 2] = -a[j] * x;
            r2[3 * j + 1] = a[j];
            r2[3 * j + 2] = -a[j] * y;
        }
        mtm += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = mtm.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let v: [SVector<f64, 12>; 4] = std::array::from_fn(|k| eig.eigenvectors.column(order[k]).into_owned());

    let mut l = Matrix6x10::zeros();
    let mut rho = SVector::<f64, 6>::zeros();
    for (i, &(a, b)) in PAIRS.iter().enumerate() {
        l.set_row(i, &l_row(&v, a, b).transpose());
        rho[i] = (frame.control[a] - frame.control[b]).norm_squared();
    }

    let mut out = Vec::new();
    for approx in [betas_approx_1, betas_approx_2, betas_approx_3] {
        let Some(b) = approx(&l, &rho) else {
            continue;
        };
        let beta = gauss_newton(&l, &rho, b);
        if !beta.iter().all(|x| x.is_finite()) {
            continue;
        }
        let pcs = camera_points(&v, &beta, &alphas);
        if let Some(pose) = kabsch(points, &pcs) {
            out.push(pose);
        }
    }
    Ok(out)
}
