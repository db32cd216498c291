mod common;

use common::*;
use putr::geometry::{
    add_noise, extract_patches, fps, knn, merge_upsampled, normalize_unit_ball, PointCloud, COVERAGE_FACTOR,
};
use rand::Rng;

fn cloud(pts: Vec<[f64; 3]>) -> PointCloud {
    PointCloud::new(pts).unwrap()
}

#[test]
fn knn_rows_are_the_nearest_sets() {
    let mut r = rng(1);
    for _ in 0..20 {
        let n = r.random_range(2..80);
        let k = r.random_range(1..=n);
        let pts = rand_points(&mut r, n);
        let idx = knn(&cloud(pts.clone()), k).unwrap();
        let oracle = brute_knn(&pts, k);
        for i in 0..n {
            assert_eq!(idx.row(i)[0], i);
            let mut got = idx.row(i).to_vec();
            let mut want = oracle[i].clone();
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want);
            let d: Vec<f64> = idx.row(i).iter().map(|&j| dist(&pts[i], &pts[j])).collect();
            assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

/// Max-min greedy selection written against the definition.
fn fps_oracle(pts: &[[f64; 3]], m: usize) -> Vec<usize> {
    let mut picked = vec![0usize];
    while picked.len() < m {
        let (mut best, mut arg) = (-1.0, 0);
        for (j, p) in pts.iter().enumerate() {
            if picked.contains(&j) {
                continue;
            }
            let d = picked.iter().map(|&i| dist(p, &pts[i])).fold(f64::INFINITY, f64::min);
            if d > best {
                best = d;
                arg = j;
            }
        }
        picked.push(arg);
    }
    picked
}

#[test]
fn fps_matches_definition() {
    let mut r = rng(2);
    for _ in 0..10 {
        let pts = rand_points(&mut r, 60);
        let m = r.random_range(1..=60);
        assert_eq!(fps(&cloud(pts.clone()), m, 0).unwrap(), fps_oracle(&pts, m));
    }
}

#[test]
fn patches_cover_large_cloud_and_merge_to_exact_size() {
    let mut r = rng(3);
    let pts = rand_points(&mut r, 2048);
    let c = cloud(pts);
    let set = extract_patches(&c, 256, COVERAGE_FACTOR).unwrap();
    let mut covered = vec![false; c.len()];
    for p in &set.patches {
        assert_eq!(p.indices.len(), 256);
        for &i in &p.indices {
            covered[i] = true;
        }
        let radius = p.normalized.points().iter().map(|q| dist(q, &[0.0; 3])).fold(0.0, f64::max);
        assert!((radius - 1.0).abs() < 1e-12);
        let back = p.denormalize(&p.normalized);
        for (a, &i) in back.points().iter().zip(&p.indices) {
            assert!(dist(a, &c.points()[i]) < 1e-12);
        }
    }
    assert!(covered.iter().all(|&x| x));
    let merged = merge_upsampled(&set.patches.iter().map(|p| p.denormalize(&p.normalized)).collect::<Vec<_>>(), 1000).unwrap();
    assert_eq!(merged.len(), 1000);
}

#[test]
fn unit_ball_normalization() {
    let mut r = rng(4);
    let pts: Vec<[f64; 3]> = rand_points(&mut r, 100).iter().map(|p| p.map(|v| 3.0 * v + 7.0)).collect();
    let (n, centroid, scale) = normalize_unit_ball(&cloud(pts.clone()));
    let mean = (0..3).map(|a| n.points().iter().map(|p| p[a]).sum::<f64>() / 100.0);
    assert!(mean.into_iter().all(|m| m.abs() < 1e-12));
    let far = n.points().iter().map(|p| dist(p, &[0.0; 3])).fold(0.0, f64::max);
    assert!((far - 1.0).abs() < 1e-12);
    for (q, p) in n.points().iter().zip(&pts) {
        for a in 0..3 {
            assert!((q[a] * scale + centroid[a] - p[a]).abs() < 1e-12);
        }
    }
}

#[test]
fn noise_is_seeded_and_zero_is_identity() {
    let mut r = rng(5);
    let c = cloud(rand_points(&mut r, 50));
    assert_eq!(add_noise(&c, 0.0, 1).unwrap(), c);
    assert_eq!(add_noise(&c, 0.01, 1).unwrap(), add_noise(&c, 0.01, 1).unwrap());
    assert_ne!(add_noise(&c, 0.01, 1).unwrap(), add_noise(&c, 0.01, 2).unwrap());
    assert!(add_noise(&c, -0.1, 1).is_err());
}
