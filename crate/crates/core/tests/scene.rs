mod common;

use std::f64::consts::PI;

use common::small_scene;
use semidense::geometry::{triangulate, Observation};
use semidense::scene::{
    generate_scene, oracle_fine_location, quantize, render_all, render_observations, DescriptorLevel, NoiseModel,
    SceneError, SceneParams,
};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn generation_is_bit_exact_per_seed() {
    let noise = NoiseModel { fine_noise_sigma: 0.5, descriptor_noise_sigma: 0.2, dropout_rate: 0.1, outlier_rate: 0.1 };
    let a = small_scene(5, noise);
    let b = small_scene(5, noise);
    assert_eq!(a, b);
    assert_eq!(render_all(&a), render_all(&b));
    for v in 0..a.views.len() {
        let oa = render_observations(&a, v).unwrap();
        for o in oa.points.iter().take(20) {
            let x = a.observed_descriptor(v, o.point_id, DescriptorLevel::Coarse);
            let y = b.observed_descriptor(v, o.point_id, DescriptorLevel::Coarse);
            assert_eq!(x.iter().map(|f| f.to_bits()).collect::<Vec<_>>(), y.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
        }
    }
}

#[test]
fn rendering_order_does_not_matter() {
    let scene = small_scene(9, NoiseModel { dropout_rate: 0.2, ..NoiseModel::zero() });
    let forward: Vec<_> = (0..scene.num_cameras()).map(|v| render_observations(&scene, v).unwrap()).collect();
    let mut backward: Vec<_> = (0..scene.num_cameras()).rev().map(|v| render_observations(&scene, v).unwrap()).collect();
    backward.reverse();
    assert_eq!(forward, backward);
}

#[test]
fn scene_invariants_hold() {
    let scene = small_scene(3, NoiseModel { descriptor_noise_sigma: 0.3, ..NoiseModel::zero() });
    for m in [&scene.coarse_descriptors, &scene.fine_descriptors] {
        for j in 0..m.rows() {
            assert!((norm(m.row(j)) - 1.0).abs() < 1e-6);
        }
    }
    let obs = render_all(&scene);
    let refs = &obs[..scene.views.len()];
    for j in 0..scene.points.len() {
        let p = scene.points[j];
        assert!(p.iter().all(|c| c.abs() <= 0.5));
        let seen = refs.iter().filter(|o| o.is_visible(j)).count();
        assert!(seen >= 2, "point {j} visible in {seen} views");
    }
    for o in &obs {
        for p in &o.points {
            let c = p.cell.center();
            assert_eq!((c.u as i64) % 8, 4);
            assert_eq!((c.v as i64) % 8, 4);
            assert_eq!(c, quantize(p.pixel));
            assert_eq!(c.u, (p.pixel.u / 8.0).floor() * 8.0 + 4.0);
            for level in [DescriptorLevel::Coarse, DescriptorLevel::Fine] {
                assert!((norm(&scene.observed_descriptor(o.view_id, p.point_id, level)) - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn zero_noise_descriptors_are_exact() {
    let scene = small_scene(4, NoiseModel::zero());
    let obs = render_observations(&scene, 0).unwrap();
    for p in &obs.points {
        assert_eq!(scene.observed_descriptor(0, p.point_id, DescriptorLevel::Coarse), scene.coarse_descriptors.row(p.point_id));
        assert_eq!(scene.observed_descriptor(0, p.point_id, DescriptorLevel::Fine), scene.fine_descriptors.row(p.point_id));
    }
}

#[test]
fn mean_camera_distance_in_range() {
    for seed in 0..100 {
        let params = SceneParams { n_points: 8, n_views: 10, n_query_views: 2, ..SceneParams::default() };
        let scene = generate_scene(seed, params).unwrap();
        let mean = scene.views.iter().map(|v| v.pose.center().norm()).sum::<f64>() / scene.views.len() as f64;
        assert!((3.0..=5.0).contains(&mean), "seed {seed}: mean distance {mean}");
    }
}

#[test]
fn invalid_parameters_are_rejected() {
    let bad = [
        SceneParams { n_points: 7, ..SceneParams::default() },
        SceneParams { n_views: 1, ..SceneParams::default() },
        SceneParams { noise: NoiseModel { dropout_rate: 1.0, ..NoiseModel::zero() }, ..SceneParams::default() },
        SceneParams { noise: NoiseModel { fine_noise_sigma: -0.1, ..NoiseModel::zero() }, ..SceneParams::default() },
    ];
    for p in bad {
        assert!(matches!(generate_scene(1, p), Err(SceneError::InvalidArgument(_))));
    }
}

#[test]
fn fine_noise_statistics() {
    let sigma = 0.5;
    let scene = small_scene(12, NoiseModel { fine_noise_sigma: sigma, ..NoiseModel::zero() });
    let mut du = Vec::new();
    let mut radial = Vec::new();
    for o in render_all(&scene) {
        for p in &o.points {
            let f = oracle_fine_location(&scene, &o, p.point_id).unwrap();
            assert!(f.chebyshev(p.cell.center()) <= 4.0);
            du.push(f.u - p.pixel.u);
            du.push(f.v - p.pixel.v);
            radial.push(f.distance(p.pixel));
        }
    }
    let n = du.len() as f64;
    let mean = du.iter().sum::<f64>() / n;
    let std = (du.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((0.45..=0.55).contains(&std), "std {std}");
    let half_normal = du.iter().map(|x| x.abs()).sum::<f64>() / n;
    let expect = sigma * (2.0 / PI).sqrt();
    assert!((half_normal - expect).abs() <= 0.1 * expect, "per-axis mean {half_normal} vs {expect}");
    let rayleigh = radial.iter().sum::<f64>() / radial.len() as f64;
    let expect = sigma * (PI / 2.0).sqrt();
    assert!((rayleigh - expect).abs() <= 0.1 * expect, "radial mean {rayleigh} vs {expect}");
}

#[test]
fn zero_noise_triangulation_bounds() {
    let scene = small_scene(6, NoiseModel::zero());
    let obs = render_all(&scene);
    let refs = &obs[..scene.views.len()];
    let f = scene.params.intrinsics.fx;
    let mut over = Vec::new();
    for j in 0..scene.points.len() {
        let seen: Vec<_> = refs.iter().filter(|o| o.is_visible(j)).collect();
        let exact: Vec<Observation> = seen
            .iter()
            .map(|o| {
                let v = &scene.views[o.view_id];
                Observation::new(v.pose, v.intrinsics, oracle_fine_location(&scene, o, j).unwrap())
            })
            .collect();
        let p = triangulate(&exact).unwrap();
        assert!((p - scene.points[j]).norm() < 1e-9, "point {j}");

        let coarse: Vec<Observation> = seen
            .iter()
            .map(|o| {
                let v = &scene.views[o.view_id];
                Observation::new(v.pose, v.intrinsics, o.get(j).unwrap().cell.center())
            })
            .collect();
        if let Ok(p) = triangulate(&coarse) {
            let depth = seen.iter().map(|o| o.get(j).unwrap().depth).fold(0.0, f64::max);
            let bound = 8.0 / f * depth * 2f64.sqrt();
            let err = (p - scene.points[j]).norm();
            if err > bound {
                over.push((j, seen.len(), err / bound));
            }
        }
    }
    assert!(over.is_empty(), "{} of {} points outside the quantization bound: {:?}", over.len(), scene.points.len(), &over[..over.len().min(10)]);
}
