mod common;

use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;

use common::{k512, random_camera, rng};
use semidense::geometry::{
    backproject, project, reprojection_cost, triangulate, GeometryError, Observation, Pixel, SE3Pose,
};

fn pose_strategy() -> impl Strategy<Value = SE3Pose> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-2.0..2.0f64))
        .prop_map(|(w, t)| SE3Pose::from_axis_angle(Vector3::from(w), Vector3::from(t)))
}

proptest! {
    #[test]
    fn rotations_stay_orthonormal(p in pose_strategy(), q in pose_strategy()) {
        for x in [p.compose(&q), p.inverse(), q.compose(&p.inverse())] {
            let r = x.rotation_matrix();
            prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).amax() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn project_backproject_round_trip(
        p in pose_strategy(),
        u in 0.0..512.0f64,
        v in 0.0..512.0f64,
        d in 0.1..20.0f64,
    ) {
        let k = k512();
        let world = p.inverse().transform_point(&backproject(Pixel::new(u, v), d, &k).unwrap());
        let px = project(&p, &k, &world).unwrap();
        prop_assert!((px.u - u).abs() < 1e-10 && (px.v - v).abs() < 1e-10);
    }

    #[test]
    fn relative_poses_compose(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
        use semidense::geometry::relative_pose;
        let via_b = relative_pose(&b, &c).compose(&relative_pose(&a, &b));
        let direct = relative_pose(&a, &c);
        prop_assert!((via_b.rotation_matrix() - direct.rotation_matrix()).amax() < 1e-10);
        prop_assert!((via_b.translation() - direct.translation()).amax() < 1e-10);
    }

    #[test]
    fn triangulation_is_rigid_invariant(seed in 0u64..10_000, w in prop::array::uniform3(-3.0..3.0f64), t in prop::array::uniform3(-2.0..2.0f64)) {
        let mut r = rng(seed);
        let k = k512();
        let p = Vector3::new(0.1, -0.2, 0.15);
        let cams: Vec<SE3Pose> = (0..4).map(|_| random_camera(&mut r, 4.0)).collect();
        let obs: Vec<Observation> = cams
            .iter()
            .map(|c| {
                let px = project(c, &k, &p).unwrap();
                Observation::new(*c, k, Pixel::new(px.u + 0.3, px.v - 0.2))
            })
            .collect();
        let Ok(x) = triangulate(&obs) else { return Ok(()); };
        // Moving the world by g maps every pose ξ to ξ·g⁻¹ and the point to g·x.
        let g = SE3Pose::from_axis_angle(Vector3::from(w), Vector3::from(t));
        let moved: Vec<Observation> = obs
            .iter()
            .map(|o| Observation::new(o.pose.compose(&g.inverse()), k, o.pixel))
            .collect();
        let y = triangulate(&moved).unwrap();
        let expect = g.transform_point(&x);
        prop_assert!((y - expect).norm() <= 1e-9 * expect.norm().max(1.0));
    }
}

#[test]
fn triangulation_matches_grid_search() {
    let k = k512();
    let mut r = rng(21);
    for _ in 0..20 {
        let p = Vector3::new(0.2, -0.1, 0.05);
        let cams: Vec<SE3Pose> = (0..3).map(|_| random_camera(&mut r, 4.0)).collect();
        let obs: Vec<Observation> = cams
            .iter()
            .map(|c| {
                let px = project(c, &k, &p).unwrap();
                Observation::new(*c, k, Pixel::new(px.u + common::gaussian(&mut r), px.v + common::gaussian(&mut r)))
            })
            .collect();
        let x = triangulate(&obs).unwrap();
        // Coarse-to-fine exhaustive search of the reprojection cost.
        let mut best = p;
        let mut step = 0.004;
        for _ in 0..6 {
            let center = best;
            let mut best_cost = reprojection_cost(&obs, &best);
            for i in -10..=10 {
                for j in -10..=10 {
                    for l in -10..=10 {
                        let c = center + Vector3::new(i as f64, j as f64, l as f64) * step;
                        let cost = reprojection_cost(&obs, &c);
                        if cost < best_cost {
                            best_cost = cost;
                            best = c;
                        }
                    }
                }
            }
            step /= 5.0;
        }
        let gap = (x - best).norm();
        assert!(gap < 1e-4, "triangulated {x:?} vs grid minimum {best:?} ({gap})");
        assert!(reprojection_cost(&obs, &x) <= reprojection_cost(&obs, &best) * (1.0 + 1e-6) + 1e-12);
    }
}

#[test]
fn point_behind_camera_is_rejected() {
    let k = k512();
    let cam = SE3Pose::look_at(Vector3::new(0.0, -4.0, 0.0), Vector3::zeros(), Vector3::z()).unwrap();
    assert!(matches!(
        project(&cam, &k, &Vector3::new(0.0, -6.0, 0.0)),
        Err(GeometryError::Cheirality { .. })
    ));
}

#[test]
fn triangulation_needs_two_views() {
    let k = k512();
    let cam = SE3Pose::look_at(Vector3::new(0.0, -4.0, 0.0), Vector3::zeros(), Vector3::z()).unwrap();
    assert!(triangulate(&[Observation::new(cam, k, Pixel::new(256.0, 256.0))]).is_err());
}

#[test]
fn left_perturbation_of_zero_is_identity() {
    let p = SE3Pose::from_axis_angle(Vector3::new(0.3, -0.2, 0.1), Vector3::new(0.5, 0.0, 4.0));
    let q = p.perturb_left(&Vector6::zeros());
    assert!((p.rotation_matrix() - q.rotation_matrix()).amax() < 1e-15);
    assert!((p.translation() - q.translation()).amax() < 1e-15);
}
