mod common;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

use common::{rng, small_scene};
use semidense::geometry::Pixel;
use semidense::localize::encoding::{encode_pixel, encode_pixels, encode_point};
use semidense::localize::loss::{focal_entries, focal_loss, l2_fine_loss, FocalParams};
use semidense::localize::matching::{dual_softmax, fine_window, mutual_nearest, softmax, window_expectation};
use semidense::localize::{
    coarse_match_2d3d, fine_match_2d3d, sample_or_pad, synthesize_query_maps, AttentionStack, MatchingConfig,
};
use semidense::pipeline::{reconstruct_scene, MatchingParams, RunConfig};
use semidense::scene::{render_observations, GridCell, NoiseModel};

#[test]
fn defaults_match_published_settings() {
    let m = MatchingConfig::default();
    assert_eq!(m.tau, 0.08);
    assert_eq!(m.theta, 0.4);
    assert_eq!(m.window, 5);
    let p = MatchingParams::default();
    assert_eq!(p.n_coarse, 3);
    assert_eq!(p.n_fine, 1);
    let f = FocalParams::default();
    assert_eq!((f.alpha, f.gamma), (0.25, 2.0));
}

#[test]
fn encoding_norm_is_bounded() {
    for dim in [16, 64, 128, 256] {
        for y in 0..64 {
            for x in 0..64 {
                let pe = encode_pixel(8.0 * x as f64 + 4.0, 8.0 * y as f64 + 4.0, 8.0, dim);
                let n = pe.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(n <= (dim as f64).sqrt() + 1e-12);
                assert!(n > 0.0);
            }
        }
        let p = encode_point(&Vector3::new(0.3, 0.7, 0.1), dim);
        assert!(p.iter().map(|v| v * v).sum::<f64>().sqrt() <= (dim as f64).sqrt());
    }
}

#[test]
fn encoded_rows_are_unit_and_distinct() {
    let feats = semidense::features::FeatureMatrix::from_rows(32, &vec![vec![1.0 / 32f64.sqrt(); 32]; 4]);
    let px = [(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (500.0, 500.0)];
    let m = encode_pixels(&feats, &px, 8.0, 0.1);
    for i in 0..4 {
        assert!((m.row(i).norm() - 1.0).abs() < 1e-12);
        for j in 0..i {
            assert!((m.row(i) - m.row(j)).norm() > 1e-6);
        }
    }
}

#[test]
fn diagonal_similarity_matches_identity() {
    let n = 12;
    let s = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / 0.08 } else { 0.0 });
    let (_, _, p) = dual_softmax(&s);
    let m = mutual_nearest(&p, 0.4);
    assert_eq!(m.len(), n);
    assert!(m.iter().all(|c| c.point == c.cell && c.confidence >= 0.4));
    // Uniform similarity gives 1/(n·m) probabilities, below the threshold.
    let (_, _, p) = dual_softmax(&DMatrix::zeros(4, 6));
    assert!(p.iter().all(|&x| (x - 1.0 / 24.0).abs() < 1e-15));
    assert!(mutual_nearest(&p, 0.4).is_empty());
    assert!(mutual_nearest(&DMatrix::zeros(0, 5), 0.4).is_empty());
}

#[test]
fn window_expectation_cases() {
    let center = Pixel::new(100.0, 60.0);
    let positions: Vec<Pixel> =
        (-2..=2).flat_map(|dy| (-2..=2).map(move |dx| Pixel::new(100.0 + 2.0 * dx as f64, 60.0 + 2.0 * dy as f64))).collect();
    // One-hot picks that position.
    let mut p = vec![0.0; 25];
    p[7] = 1.0;
    assert_eq!(window_expectation(center, &positions, &p), positions[7]);
    // Uniform returns the center.
    let u = vec![1.0 / 25.0; 25];
    let e = window_expectation(center, &positions, &u);
    assert!(e.distance(center) < 1e-12);
    // Two equal modes average.
    let mut b = vec![0.0; 25];
    b[0] = 0.5;
    b[24] = 0.5;
    let e = window_expectation(center, &positions, &b);
    assert!(e.distance(center) < 1e-12);
    let mut b = vec![0.0; 25];
    b[12] = 0.5;
    b[14] = 0.5;
    assert!(window_expectation(center, &positions, &b).distance(Pixel::new(102.0, 60.0)) < 1e-12);
    // Softmax of equal logits is uniform.
    let s = softmax(&DVector::from_element(25, 3.0));
    assert!(s.iter().all(|&x| (x - 1.0 / 25.0).abs() < 1e-15));
}

fn matched_setup(seed: u64, noise: NoiseModel) -> (semidense::scene::SyntheticScene, semidense::refine::PointCloudModel) {
    let scene = small_scene(seed, noise);
    let mut config = RunConfig::default();
    config.scene = scene.params;
    let (model, _, _, _) = reconstruct_scene(&scene, &config);
    (scene, model)
}

#[test]
fn bypass_matching_is_exact_on_clean_scene() {
    let (scene, model) = matched_setup(41, NoiseModel::zero());
    let cfg = MatchingConfig::default();
    let nearest = |p: &Vector3<f64>| {
        (0..scene.points.len()).min_by(|&a, &b| (scene.points[a] - p).norm().total_cmp(&(scene.points[b] - p).norm())).unwrap()
    };
    let truth: Vec<usize> = model.points.iter().map(nearest).collect();
    let (mut on_lattice, mut total) = (0usize, 0usize);
    for q in scene.query_ids() {
        let obs = render_observations(&scene, q).unwrap();
        let maps = synthesize_query_maps(&scene, &obs);
        let coarse = coarse_match_2d3d(&model, &maps, &AttentionStack::bypass(scene.params.coarse_dim), &cfg).unwrap();
        assert!(!coarse.matches.is_empty());
        for m in &coarse.matches {
            let cell = GridCell { x: m.cell as u32 % maps.coarse.cols, y: m.cell as u32 / maps.coarse.cols };
            assert_eq!(obs.owner(cell), Some(truth[m.point]), "query {q}: wrong coarse match");
        }
        let fine = fine_match_2d3d(&model, &maps, &coarse.matches, &AttentionStack::bypass(scene.params.fine_dim), &cfg).unwrap();
        assert_eq!(fine.len(), coarse.matches.len());
        for f in &fine {
            let o = obs.get(truth[f.point]).unwrap();
            // A point lands on its nearest stride-2 fine pixel unless a nearer
            // point claimed that pixel first.
            on_lattice += (f.location.distance(o.pixel) <= 2f64.sqrt() + 1e-9) as usize;
            total += 1;
            assert!(f.location.chebyshev(maps.coarse.position_of(coarse.matches.iter().find(|m| m.point == f.point).unwrap().cell)) <= 4.0);
            assert!(f.confidence > 0.0 && f.confidence <= 1.0);
        }
    }
    assert!(on_lattice as f64 >= 0.95 * total as f64, "{on_lattice}/{total} fine matches on the lattice");
}

#[test]
fn border_windows_are_truncated() {
    let (scene, _) = matched_setup(42, NoiseModel::zero());
    let q = scene.query_ids().next().unwrap();
    let maps = synthesize_query_maps(&scene, &render_observations(&scene, q).unwrap());
    let (idx, truncated) = fine_window(&maps, 0, 5);
    assert!(!truncated);
    assert_eq!(idx.len(), 25);
    let (idx, truncated) = fine_window(&maps, 0, 7);
    assert!(truncated);
    assert_eq!(idx.len(), 36);
    let last = maps.coarse.len() - 1;
    let (idx, _) = fine_window(&maps, last, 5);
    let center = maps.coarse.position_of(last);
    for i in idx {
        assert!(maps.fine.position_of(i).chebyshev(center) <= 4.0);
    }
}

#[test]
fn empty_model_matches_nothing() {
    let (scene, _) = matched_setup(43, NoiseModel::zero());
    let q = scene.query_ids().next().unwrap();
    let maps = synthesize_query_maps(&scene, &render_observations(&scene, q).unwrap());
    let empty = semidense::refine::PointCloudModel::default();
    let stack = AttentionStack::seeded(scene.params.coarse_dim, 2, 1);
    let c = coarse_match_2d3d(&empty, &maps, &stack, &MatchingConfig::default()).unwrap();
    assert!(c.matches.is_empty());
}

#[test]
fn attention_stack_round_trips_through_sections() {
    let stack = AttentionStack::seeded(16, 3, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.fmat");
    let sections: Vec<semidense::io::Section> =
        stack.to_sections().into_iter().map(|(n, m)| semidense::io::Section::f64(n, m)).collect();
    assert_eq!(sections.len(), 3 * 2 * 5);
    semidense::io::save_fmat(&path, &sections).unwrap();
    let back: BTreeMap<String, _> =
        semidense::io::load_fmat(&path).unwrap().into_iter().map(|s| (s.name, s.matrix)).collect();
    assert_eq!(AttentionStack::from_sections(&back).unwrap(), stack);
    let mut partial = back.clone();
    partial.remove("layer1.cross.ff2");
    assert!(AttentionStack::from_sections(&partial).is_err());
}

#[test]
fn attention_stack_is_permutation_equivariant() {
    let mut r = rng(44);
    let stack = AttentionStack::seeded(24, 2, 3);
    let a = DMatrix::from_fn(10, 24, |_, _| common::gaussian(&mut r));
    let b = DMatrix::from_fn(7, 24, |_, _| common::gaussian(&mut r));
    let (ta, tb) = stack.apply(&a, &b).unwrap();
    let perm: Vec<usize> = vec![3, 1, 4, 0, 9, 2, 6, 5, 8, 7];
    let (pa, pb) = stack.apply(&a.select_rows(&perm), &b).unwrap();
    assert!((pa - ta.select_rows(&perm)).amax() < 1e-12);
    assert!((pb - tb).amax() < 1e-12);
    for row in ta.row_iter() {
        assert!((row.norm() - 1.0).abs() < 1e-12);
    }
    let bypass = AttentionStack::bypass(24);
    assert_eq!(bypass.apply(&a, &b).unwrap(), (a, b));
}

#[test]
fn focal_negative_sampling() {
    let mut gt = DMatrix::zeros(30, 40);
    gt[(0, 0)] = 1.0;
    gt[(5, 7)] = 1.0;
    let e = focal_entries(&gt, 10);
    assert_eq!(e.iter().filter(|x| x.2).count(), 2);
    assert_eq!(e.iter().filter(|x| !x.2).count(), 20);
    for (j, q, pos) in e {
        assert!(pos || j == 0 || j == 5 || q == 0 || q == 7);
    }
    // A confident correct prediction costs almost nothing.
    let mut p = DMatrix::from_element(30, 40, 1e-6);
    p[(0, 0)] = 1.0 - 1e-6;
    p[(5, 7)] = 1.0 - 1e-6;
    assert!(focal_loss(&p, &gt, &FocalParams::default()).unwrap() < 1e-10);
    assert!(focal_loss(&DMatrix::from_element(30, 40, 0.5), &gt, &FocalParams::default()).unwrap() > 1e-3);
    assert_eq!(l2_fine_loss(&[Pixel::new(1.0, 1.0)], &[Pixel::new(4.0, 5.0)]).unwrap(), 25.0);
    assert!(l2_fine_loss(&[], &[Pixel::default()]).is_err());
}

proptest! {
    #[test]
    fn sampler_returns_exact_budget(n in 0usize..300, target in 1usize..200, seed in 0u64..50) {
        let s = sample_or_pad(n, target, seed);
        if n == 0 {
            prop_assert!(s.is_empty());
        } else {
            prop_assert_eq!(s.len(), target);
            prop_assert!(s.iter().all(|&(i, _)| i < n));
            let real: Vec<usize> = s.iter().filter(|x| !x.1).map(|x| x.0).collect();
            let mut uniq = real.clone();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), real.len());
            prop_assert_eq!(real.len(), n.min(target));
        }
        prop_assert_eq!(sample_or_pad(n, target, seed), s);
    }

    #[test]
    fn dual_softmax_bounds(rows in 1usize..12, cols in 1usize..12, seed in 0u64..1000, scale in 0.1..30.0f64) {
        let mut r = rng(seed);
        let s = DMatrix::from_fn(rows, cols, |_, _| scale * common::gaussian(&mut r));
        let (a, b, p) = dual_softmax(&s);
        for ((p, a), b) in p.iter().zip(a.iter()).zip(b.iter()) {
            prop_assert!((0.0..=1.0).contains(p));
            prop_assert!(*p <= *a && *p <= *b);
        }
        let m = mutual_nearest(&p, 0.0);
        let mut pts: Vec<usize> = m.iter().map(|c| c.point).collect();
        let mut cells: Vec<usize> = m.iter().map(|c| c.cell).collect();
        pts.sort_unstable();
        pts.dedup();
        cells.sort_unstable();
        cells.dedup();
        prop_assert_eq!(pts.len(), m.len());
        prop_assert_eq!(cells.len(), m.len());
    }
}
