//! Query-image feature maps.
//!
//! Without an image backbone the maps are synthesized: every grid position
//! starts as a random unit vector and the descriptors of visible points are
//! splatted at their projections.

use std::collections::HashMap;

use crate::features::FeatureMatrix;
use crate::geometry::{CameraIntrinsics, Pixel};
use crate::rng::{stream, Domain};
use crate::scene::{gaussian_unit, DescriptorLevel, SyntheticScene, ViewId, ViewObservations, GRID_STRIDE};

/// Stride of the fine map in pixels.
pub const FINE_STRIDE: u32 = 2;

/// Dense descriptor grid; entry `(x, y)` sits at pixel `stride·(x, y) + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub cols: u32,
    pub rows: u32,
    pub stride: u32,
    pub offset: f64,
    /// Row-major over `(y, x)`.
    pub data: FeatureMatrix,
}

impl FeatureGrid {
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, x: u32, y: u32) -> usize {
        (y * self.cols + x) as usize
    }

    pub fn at(&self, x: u32, y: u32) -> &[f64] {
        self.data.row(self.index(x, y))
    }

    pub fn position(&self, x: u32, y: u32) -> Pixel {
        Pixel::new(
            (x * self.stride) as f64 + self.offset,
            (y * self.stride) as f64 + self.offset,
        )
    }

    pub fn position_of(&self, index: usize) -> Pixel {
        let cols = self.cols as usize;
        self.position((index % cols) as u32, (index / cols) as u32)
    }

    /// Grid coordinate nearest to a pixel, if inside the grid.
    pub fn nearest(&self, px: Pixel) -> Option<(u32, u32)> {
        let x = ((px.u - self.offset) / self.stride as f64).round();
        let y = ((px.v - self.offset) / self.stride as f64).round();
        (x >= 0.0 && y >= 0.0 && x < self.cols as f64 && y < self.rows as f64).then_some((x as u32, y as u32))
    }
}

/// Coarse (stride 8) and fine (stride 2) descriptor maps of one query image.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatureMaps {
    pub view_id: ViewId,
    pub intrinsics: CameraIntrinsics,
    pub coarse: FeatureGrid,
    pub fine: FeatureGrid,
}

fn noise_floor(seed: u64, view: ViewId, level: u64, cols: u32, rows: u32, dim: usize) -> FeatureMatrix {
    let mut rng = stream(seed, Domain::FeatureFloor, view as u64, level);
    let n = (cols * rows) as usize;
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        data.extend(gaussian_unit(&mut rng, dim));
    }
    FeatureMatrix::from_vec(n, dim, data)
}

/// Builds the maps of a view from its rendered observations.
///
/// Coarse cells take their owner's observed descriptor. On the fine map each
/// point lands on the nearest fine pixel; coarse-cell owners take precedence,
/// then the nearer point.
pub fn synthesize_query_maps(scene: &SyntheticScene, obs: &ViewObservations) -> QueryFeatureMaps {
    let view = obs.view_id;
    let k = scene.camera(view).expect("observations of a scene view").intrinsics;
    let (cw, ch) = (k.width / GRID_STRIDE, k.height / GRID_STRIDE);
    let (fw, fh) = (k.width / FINE_STRIDE, k.height / FINE_STRIDE);

    let mut coarse = FeatureGrid {
        cols: cw,
        rows: ch,
        stride: GRID_STRIDE,
        offset: GRID_STRIDE as f64 / 2.0,
        data: noise_floor(scene.seed, view, 0, cw, ch, scene.params.coarse_dim),
    };
    for (cell, owner) in obs.owned_cells() {
        let d = scene.observed_descriptor(view, owner, DescriptorLevel::Coarse);
        let i = coarse.index(cell.x, cell.y);
        coarse.data.row_mut(i).copy_from_slice(&d);
    }

    let mut fine = FeatureGrid {
        cols: fw,
        rows: fh,
        stride: FINE_STRIDE,
        offset: 0.0,
        data: noise_floor(scene.seed, view, 1, fw, fh, scene.params.fine_dim),
    };
    let mut winner: HashMap<usize, (bool, f64, usize)> = HashMap::new();
    for o in &obs.points {
        let Some((x, y)) = fine.nearest(o.pixel) else {
            continue;
        };
        let i = fine.index(x, y);
        let owner = obs.owner(o.cell) == Some(o.point_id);
        let better = match winner.get(&i) {
            None => true,
            Some(&(w_owner, w_depth, _)) => (owner, -o.depth) > (w_owner, -w_depth),
        };
        if better {
            winner.insert(i, (owner, o.depth, o.point_id));
        }
    }
    for (i, (_, _, point)) in winner {
        let d = scene.observed_descriptor(view, point, DescriptorLevel::Fine);
        fine.data.row_mut(i).copy_from_slice(&d);
    }

    QueryFeatureMaps { view_id: view, intrinsics: k, coarse, fine }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, render_observations, NoiseModel, SceneParams};

    #[test]
    fn maps_have_expected_shape_and_unit_rows() {
        let params = SceneParams { n_points: 200, n_views: 4, n_query_views: 1, ..SceneParams::new(200, 4, NoiseModel::zero()) };
        let scene = generate_scene(3, params).unwrap();
        let q = scene.query_ids().start;
        let obs = render_observations(&scene, q).unwrap();
        let maps = synthesize_query_maps(&scene, &obs);
        assert_eq!((maps.coarse.cols, maps.coarse.rows), (64, 64));
        assert_eq!((maps.fine.cols, maps.fine.rows), (256, 256));
        assert!(maps.coarse.data.max_row_norm_error() < 1e-12);
        assert!(maps.fine.data.max_row_norm_error() < 1e-12);
        for (cell, owner) in obs.owned_cells() {
            assert_eq!(maps.coarse.at(cell.x, cell.y), scene.coarse_descriptors.row(owner));
            let (x, y) = maps.fine.nearest(obs.get(owner).unwrap().pixel).unwrap();
            let at = maps.fine.at(x, y);
            assert!(obs.owned_cells().any(|(_, p)| scene.fine_descriptors.row(p) == at));
        }
        assert_eq!(maps.coarse.position(0, 0), Pixel::new(4.0, 4.0));
        assert_eq!(maps.fine.position(3, 1), Pixel::new(6.0, 2.0));
    }
}
