#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semidense::geometry::{CameraIntrinsics, SE3Pose};
use semidense::scene::{generate_scene, NoiseModel, SceneParams, SyntheticScene};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn k512() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 256.0, 256.0, 512, 512).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| gaussian(rng)).normalize()
}

/// Camera at `radius` from the origin looking at a point near it.
pub fn random_camera(rng: &mut ChaCha8Rng, radius: f64) -> SE3Pose {
    loop {
        let c = random_unit(rng) * radius;
        let target = Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
        let up = random_unit(rng);
        if let Ok(p) = SE3Pose::look_at(c, target, up) {
            return p;
        }
    }
}

pub fn small_scene(seed: u64, noise: NoiseModel) -> SyntheticScene {
    let params = SceneParams { n_points: 400, n_views: 12, n_query_views: 3, noise, ..SceneParams::default() };
    generate_scene(seed, params).unwrap()
}

pub fn angle_deg(a: &SE3Pose, b: &SE3Pose) -> f64 {
    let r = a.rotation_matrix().transpose() * b.rotation_matrix();
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}
