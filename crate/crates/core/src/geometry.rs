//! Coordinate-space kernels: brute-force kNN, farthest point sampling, seed
//! patch extraction and merging, and Gaussian noise injection.
//!
//! Everything here works in `f64` and is deterministic: ties are always
//! resolved towards the lower point index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// An `N×3` set of finite coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySet("point cloud"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("point cloud has non-finite coordinates".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::shape("point cloud", &[flat.len()], &[3]));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        PointCloud::new(idx.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    pub fn translated(&self, t: Point) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        }
    }
}

/// Row `i` lists the `k` nearest points to point `i`, self first, ordered by
/// `(squared distance, index)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    n: usize,
    k: usize,
    idx: Vec<usize>,
}

impl NeighborIndex {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    /// Flat `N·k` row-major indices.
    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }
}

fn sorted_by_distance(points: &[Point], query: &Point, take: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(j, p)| (dist2(query, p), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if take < order.len() {
        order.select_nth_unstable_by(take - 1, cmp);
        order.truncate(take);
    }
    order.sort_unstable_by(cmp);
    order.into_iter().map(|(_, j)| j).collect()
}

/// Exact brute-force k nearest neighbours.
///
/// The query point is its own first neighbour. Exact duplicates of a point
/// tie with it at distance 0; the self entry still comes first.
pub fn knn(cloud: &PointCloud, k: usize) -> Result<NeighborIndex> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("knn: k = {k} must be in 1..={n}")));
    }
    let pts = cloud.points();
    let mut idx = Vec::with_capacity(n * k);
    for (i, p) in pts.iter().enumerate() {
        let mut row = sorted_by_distance(pts, p, k);
        if row[0] != i {
            // Duplicates of p sit at distance 0 too; move self to the front.
            match row.iter().position(|&j| j == i) {
                Some(pos) => {
                    row[..=pos].rotate_right(1);
                }
                None => {
                    row.pop();
                    row.insert(0, i);
                }
            }
        }
        idx.extend(row);
    }
    Ok(NeighborIndex { n, k, idx })
}

/// Greedy farthest point sampling: picks `start`, then repeatedly the point
/// whose distance to the selected set is largest (lowest index on ties).
pub fn fps(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m > n {
        return Err(Error::Argument(format!("fps: m = {m} exceeds {n} points")));
    }
    if start >= n {
        return Err(Error::Index {
            op: "fps",
            index: start,
            len: n,
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let pts = cloud.points();
    let mut best = vec![f64::INFINITY; n];
    let mut picked = Vec::with_capacity(m);
    let mut current = start;
    for _ in 0..m {
        picked.push(current);
        best[current] = -1.0;
        let c = pts[current];
        let mut next = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (j, p) in pts.iter().enumerate() {
            if best[j] < 0.0 {
                continue;
            }
            let d = dist2(&c, p);
            if d < best[j] {
                best[j] = d;
            }
            if best[j] > far {
                far = best[j];
                next = j;
            }
        }
        if next == usize::MAX {
            break;
        }
        current = next;
    }
    Ok(picked)
}

/// One normalized seed patch: `normalized[i] = (parent[indices[i]] − centroid) / scale`.
#[derive(Clone, Debug)]
pub struct Patch {
    pub indices: Vec<usize>,
    pub normalized: PointCloud,
    pub centroid: Point,
    pub scale: f64,
}

impl Patch {
    pub fn denormalize(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud
                .points()
                .iter()
                .map(|p| {
                    [
                        p[0] * self.scale + self.centroid[0],
                        p[1] * self.scale + self.centroid[1],
                        p[2] * self.scale + self.centroid[2],
                    ]
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
}

/// Centers a cloud on its centroid and scales it into the unit ball.
/// Returns `(normalized, centroid, scale)`; a single-point cloud gets scale 1.
pub fn normalize_unit_ball(cloud: &PointCloud) -> (PointCloud, Point, f64) {
    let c = cloud.centroid();
    let radius = cloud
        .points()
        .iter()
        .map(|p| dist2(p, &c))
        .fold(0.0f64, f64::max)
        .sqrt();
    let scale = if radius > 0.0 { radius } else { 1.0 };
    let normalized = PointCloud {
        points: cloud
            .points()
            .iter()
            .map(|p| [(p[0] - c[0]) / scale, (p[1] - c[1]) / scale, (p[2] - c[2]) / scale])
            .collect(),
    };
    (normalized, c, scale)
}

/// Default multiplier on `N / patch_size` for the number of FPS seeds.
pub const COVERAGE_FACTOR: usize = 3;

/// Cuts `cloud` into overlapping seed patches of `patch_size` points that
/// together cover every point.
///
/// Seeds are `ceil(N·coverage_factor / patch_size)` FPS picks (one when
/// `patch_size == N`); if any point is
/// still uncovered, the uncovered point farthest from all seeds becomes an
/// extra seed until coverage is complete.
pub fn extract_patches(
    cloud: &PointCloud,
    patch_size: usize,
    coverage_factor: usize,
) -> Result<PatchSet> {
    let n = cloud.len();
    if patch_size == 0 || patch_size > n {
        return Err(Error::Argument(format!(
            "patch size {patch_size} must be in 1..={n}"
        )));
    }
    // A patch spanning the whole cloud is the whole cloud; more seeds would
    // only duplicate it.
    let n_seeds = if patch_size == n {
        1
    } else {
        (n * coverage_factor.max(1)).div_ceil(patch_size).min(n)
    };
    let mut seeds = fps(cloud, n_seeds, 0)?;
    let pts = cloud.points();
    let mut covered = vec![false; n];
    let mut patches = Vec::new();
    let mut seed_dist = vec![f64::INFINITY; n];

    let mut add_patch = |seed: usize, covered: &mut [bool], seed_dist: &mut [f64]| -> Result<()> {
        let indices = sorted_by_distance(pts, &pts[seed], patch_size);
        for &i in &indices {
            covered[i] = true;
        }
        for (j, p) in pts.iter().enumerate() {
            seed_dist[j] = seed_dist[j].min(dist2(p, &pts[seed]));
        }
        let (normalized, centroid, scale) = normalize_unit_ball(&cloud.select(&indices)?);
        patches.push(Patch {
            indices,
            normalized,
            centroid,
            scale,
        });
        Ok(())
    };

    for &s in &seeds {
        add_patch(s, &mut covered, &mut seed_dist)?;
    }
    loop {
        let next = (0..n)
            .filter(|&j| !covered[j])
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if seed_dist[b] >= seed_dist[j] => Some(b),
                _ => Some(j),
            });
        let Some(seed) = next else { break };
        seeds.push(seed);
        add_patch(seed, &mut covered, &mut seed_dist)?;
    }
    Ok(PatchSet { patches })
}

/// Concatenates de-normalized upsampled patches and reduces them to exactly
/// `target` points with FPS from index 0.
pub fn merge_upsampled(patches: &[PointCloud], target: usize) -> Result<PointCloud> {
    let all: Vec<Point> = patches.iter().flat_map(|p| p.points().iter().copied()).collect();
    if all.len() < target {
        return Err(Error::Argument(format!(
            "merge: {} points available, {target} requested",
            all.len()
        )));
    }
    let merged = PointCloud::new(all)?;
    let idx = fps(&merged, target, 0)?;
    merged.select(&idx)
}

/// `p' = p + beta·g` with `g ~ N(0, 1)` per coordinate from a seeded stream.
pub fn add_noise(cloud: &PointCloud, beta: f64, seed: u64) -> Result<PointCloud> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Argument(format!("noise factor {beta} must be >= 0")));
    }
    if beta == 0.0 {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            for v in &mut q {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += beta * g;
            }
            q
        })
        .collect();
    PointCloud::new(points)
}

/// Minimum pairwise distance within a set (∞ for fewer than two points).
pub fn min_spacing(points: &[Point]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(dist2(&points[i], &points[j]));
        }
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        )
        .unwrap()
    }

    fn sphere_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = (1.0 - z * z).sqrt();
                    [r * phi.cos(), r * phi.sin(), z]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn knn_collinear() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let nb = knn(&c, 2).unwrap();
        assert_eq!(nb.row(1), &[1, 0]);
        assert_eq!(nb.row(0), &[0, 1]);
        assert_eq!(nb.row(2), &[2, 1]);
    }

    #[test]
    fn knn_k1_is_self() {
        let c = random_cloud(10, 1);
        let nb = knn(&c, 1).unwrap();
        for i in 0..10 {
            assert_eq!(nb.row(i), &[i]);
        }
    }

    #[test]
    fn knn_rejects_large_k() {
        let c = random_cloud(4, 2);
        assert!(knn(&c, 5).is_err());
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let c = random_cloud(64, 3);
        let nb = knn(&c, 9).unwrap();
        let pts = c.points();
        for i in 0..64 {
            let mut all: Vec<(f64, usize)> = (0..64).map(|j| (dist2(&pts[i], &pts[j]), j)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..9].iter().map(|e| e.1).collect();
            assert_eq!(nb.row(i), &want[..]);
        }
    }

    #[test]
    fn knn_duplicates_keep_self_first() {
        let c = PointCloud::new(vec![[0.0; 3], [0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let nb = knn(&c, 2).unwrap();
        assert_eq!(nb.row(0), &[0, 1]);
        assert_eq!(nb.row(1), &[1, 0]);
        assert_eq!(nb.row(2), &[2, 0]);
    }

    #[test]
    fn fps_square_picks_diagonal() {
        let c = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(fps(&c, 2, 0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn fps_all_points_is_permutation() {
        let c = random_cloud(30, 4);
        let mut picked = fps(&c, 30, 0).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, (0..30).collect::<Vec<_>>());
        assert!(fps(&c, 31, 0).is_err());
    }

    #[test]
    fn fps_beats_random_subsets_on_spacing() {
        let c = random_cloud(128, 5);
        let m = 16;
        let sel = c.select(&fps(&c, m, 0).unwrap()).unwrap();
        let fps_spacing = min_spacing(sel.points());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let idx = rand::seq::index::sample(&mut rng, 128, m).into_vec();
            let sub = c.select(&idx).unwrap();
            assert!(fps_spacing >= min_spacing(sub.points()));
        }
    }

    #[test]
    fn single_patch_when_size_equals_n() {
        let c = random_cloud(50, 7);
        let ps = extract_patches(&c, 50, COVERAGE_FACTOR).unwrap();
        assert_eq!(ps.patches.len(), 1);
        let mean = c.centroid();
        for a in 0..3 {
            assert!((ps.patches[0].centroid[a] - mean[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_patches_cover_and_fit_unit_ball() {
        let c = sphere_cloud(512, 8);
        let ps = extract_patches(&c, 256, COVERAGE_FACTOR).unwrap();
        assert!(ps.patches.len() >= 6);
        let mut covered = vec![false; 512];
        for p in &ps.patches {
            assert_eq!(p.indices.len(), 256);
            for &i in &p.indices {
                covered[i] = true;
            }
            for q in p.normalized.points() {
                assert!(dist2(q, &[0.0; 3]).sqrt() <= 1.0 + 1e-6);
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn backfill_covers_clustered_cloud() {
        // Two distant clusters of very different sizes with tiny patches.
        let mut pts: Vec<Point> = random_cloud(40, 9).into_points();
        pts.extend(random_cloud(3, 10).points().iter().map(|p| [p[0] + 50.0, p[1], p[2]]));
        let c = PointCloud::new(pts).unwrap();
        let ps = extract_patches(&c, 4, 1).unwrap();
        let mut covered = vec![false; c.len()];
        for p in &ps.patches {
            for &i in &p.indices {
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&v| v));
    }

    #[test]
    fn denormalize_restores_parent() {
        let c = random_cloud(200, 11).translated([3.0, -2.0, 10.0]);
        let ps = extract_patches(&c, 64, COVERAGE_FACTOR).unwrap();
        for p in &ps.patches {
            let back = p.denormalize(&p.normalized);
            for (q, &i) in back.points().iter().zip(&p.indices) {
                assert!(dist2(q, &c.points()[i]).sqrt() < 1e-6);
            }
        }
    }

    #[test]
    fn merge_exact_size_and_duplicate_removal() {
        let a = random_cloud(32, 12);
        let single = merge_upsampled(std::slice::from_ref(&a), 32).unwrap();
        assert_eq!(single.len(), 32);
        let mut got = single.to_flat();
        let mut want = a.to_flat();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);

        let merged = merge_upsampled(&[a.clone(), a.clone()], 32).unwrap();
        assert_eq!(merged.len(), 32);
        assert!(min_spacing(merged.points()) >= min_spacing(a.points()) * (1.0 - 1e-6));

        assert!(merge_upsampled(&[a], 33).is_err());
    }

    #[test]
    fn noise_zero_and_determinism() {
        let c = random_cloud(20, 13);
        assert_eq!(add_noise(&c, 0.0, 1).unwrap(), c);
        assert_eq!(add_noise(&c, 0.1, 7).unwrap(), add_noise(&c, 0.1, 7).unwrap());
        assert_ne!(add_noise(&c, 0.1, 7).unwrap(), add_noise(&c, 0.1, 8).unwrap());
        assert!(add_noise(&c, -1.0, 1).is_err());
    }

    #[test]
    fn noise_sample_std() {
        let c = PointCloud::new(vec![[0.0; 3]; 10_000]).unwrap();
        let noisy = add_noise(&c, 0.01, 42).unwrap();
        for a in 0..3 {
            let vals: Vec<f64> = noisy.points().iter().map(|p| p[a]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            assert!((var.sqrt() - 0.01).abs() < 0.05 * 0.01, "axis {a}: {}", var.sqrt());
        }
    }
}
