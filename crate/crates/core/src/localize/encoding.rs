//! Sinusoidal positional encodings for 2D grid positions and 3D points.

use nalgebra::{DMatrix, Vector3};

use crate::features::FeatureMatrix;

/// Geometric frequency ladder `base^(-k/n)`, `k = 0..n`.
pub fn grid_frequencies(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 10000f64.powf(-(k as f64) / n as f64))
        .collect()
}

/// Octave ladder `π·2^k` for coordinates normalized to `[0, 1]`.
pub fn box_frequencies(n: usize) -> Vec<f64> {
    (0..n).map(|k| std::f64::consts::PI * 2f64.powi(k as i32)).collect()
}

/// Raw encoding of one position: for every axis and frequency a
/// `(sin, cos)` pair, zero-padded to `dim`. Its norm is `√(axes·frequencies)`.
pub fn sinusoidal(position: &[f64], frequencies: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let mut c = 0;
    for &x in position {
        for &f in frequencies {
            if c + 1 >= dim {
                return out;
            }
            out[c] = (x * f).sin();
            out[c + 1] = (x * f).cos();
            c += 2;
        }
    }
    out
}

/// Frequencies per axis: `dim/4` channels per axis for 2D, `dim/6` for 3D.
fn pairs_per_axis(dim: usize, axes: usize) -> usize {
    dim / (2 * axes) / 2
}

/// Encoding of a pixel position, measured in coarse-grid cells.
pub fn encode_pixel(u: f64, v: f64, stride: f64, dim: usize) -> Vec<f64> {
    sinusoidal(&[u / stride, v / stride], &grid_frequencies(pairs_per_axis(dim, 2)), dim)
}

/// Axis-aligned bounds used to map model points into the unit box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitBox {
    pub min: Vector3<f64>,
    pub extent: Vector3<f64>,
}

impl UnitBox {
    pub fn of(points: &[Vector3<f64>]) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        if points.is_empty() {
            min = Vector3::zeros();
            max = Vector3::zeros();
        }
        // Flat axes map to 0 rather than dividing by zero.
        let extent = (max - min).map(|e| if e > 1e-12 { e } else { 1.0 });
        Self { min, extent }
    }

    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.min).component_div(&self.extent)
    }
}

pub fn encode_point(p_unit: &Vector3<f64>, dim: usize) -> Vec<f64> {
    sinusoidal(p_unit.as_slice(), &box_frequencies(pairs_per_axis(dim, 3)), dim)
}

/// Adds `weight · pe / ‖pe‖` to each row and renormalizes.
fn add_encoding(features: &FeatureMatrix, weight: f64, pe_of: impl Fn(usize) -> Vec<f64>) -> DMatrix<f64> {
    let n = features.rows();
    let c = features.cols();
    let mut out = DMatrix::zeros(n, c);
    for i in 0..n {
        let pe = pe_of(i);
        let pn = crate::features::norm(&pe).max(1e-12);
        let f = features.row(i);
        for k in 0..c {
            out[(i, k)] = f[k] + weight * pe[k] / pn;
        }
        let rn = out.row(i).norm();
        if rn > 1e-12 {
            out.row_mut(i).unscale_mut(rn);
        }
    }
    out
}

pub fn encode_pixels(features: &FeatureMatrix, pixels: &[(f64, f64)], stride: f64, weight: f64) -> DMatrix<f64> {
    let c = features.cols();
    add_encoding(features, weight, |i| encode_pixel(pixels[i].0, pixels[i].1, stride, c))
}

pub fn encode_points(features: &FeatureMatrix, points: &[Vector3<f64>], weight: f64) -> DMatrix<f64> {
    let c = features.cols();
    let b = UnitBox::of(points);
    add_encoding(features, weight, |i| encode_point(&b.normalize(&points[i]), c))
}
