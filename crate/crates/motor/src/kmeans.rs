//! Lloyd's algorithm with k-means++ seeding.
//!
//! Distances are computed on f32 values with f64 accumulators so results
//! are reproducible at large point counts. The assignment step may run in
//! parallel (each point is independent); centroid updates accumulate in a
//! fixed point order.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// K x q centroid matrix, row-major.
    pub centroids: Vec<f32>,
    /// Nearest-centroid index per point, ties broken to the lowest index.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each completed iteration.
    pub wcss_trace: Vec<f64>,
}

/// Squared Euclidean distance, f64 accumulation.
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centroids: &[f32], q: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.chunks_exact(q).enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first centroid uniform, later centroids D^2-weighted.
fn seed_centroids(points: &[f32], p: usize, q: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut centroids = Vec::with_capacity(k * q);
    let first = rng.gen_range(0..p);
    centroids.extend_from_slice(&points[first * q..(first + 1) * q]);
    let mut d2: Vec<f64> = points
        .chunks_exact(q)
        .map(|pt| sq_dist(pt, &centroids[..q]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let choice = if total > 0.0 {
            WeightedIndex::new(&d2).map(|w| w.sample(rng)).unwrap_or_else(|_| rng.gen_range(0..p))
        } else {
            rng.gen_range(0..p)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&points[choice * q..(choice + 1) * q]);
        let new_c = centroids[start..].to_vec();
        for (pt, d) in points.chunks_exact(q).zip(d2.iter_mut()) {
            let nd = sq_dist(pt, &new_c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Lloyd iterations from the given initial centroids. Stops when the
/// assignment is unchanged or after `max_iters`. Empty clusters are
/// re-seeded to the point farthest from its own centroid.
pub fn lloyd(
    points: &[f32],
    p: usize,
    q: usize,
    mut centroids: Vec<f32>,
    max_iters: usize,
) -> KmeansResult {
    let k = centroids.len() / q;
    let mut assignments = assign_all(points, p, q, &centroids);
    let mut wcss_trace = Vec::new();
    let mut prev_wcss = f64::INFINITY;
    for _ in 0..max_iters {
        // Update step: per-cluster mean, accumulated in point order.
        let mut sums = vec![0.0f64; k * q];
        let mut counts = vec![0usize; k];
        for (pt, &a) in points.chunks_exact(q).zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a * q..(a + 1) * q].iter_mut().zip(pt) {
                *s += v as f64;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for (c, &s) in centroids[j * q..(j + 1) * q].iter_mut().zip(&sums[j * q..]) {
                    *c = (s / counts[j] as f64) as f32;
                }
            }
        }
        // Re-seed empty clusters to the worst-represented point.
        let empties: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empties.is_empty() {
            let mut dists: Vec<(usize, f64)> = (0..p)
                .map(|i| {
                    let pt = &points[i * q..(i + 1) * q];
                    (i, sq_dist(pt, &centroids[assignments[i] * q..(assignments[i] + 1) * q]))
                })
                .collect();
            dists.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (slot, &j) in empties.iter().enumerate() {
                let i = dists[slot % p].0;
                centroids[j * q..(j + 1) * q].copy_from_slice(&points[i * q..(i + 1) * q]);
            }
        }

        let new_assignments = assign_all(points, p, q, &centroids);
        let wcss = wcss_of(points, q, &centroids, &new_assignments);
        if empties.is_empty() {
            debug_assert!(
                wcss <= prev_wcss * (1.0 + 1e-9) + 1e-12,
                "Lloyd WCSS increased: {prev_wcss} -> {wcss}"
            );
        }
        prev_wcss = wcss;
        wcss_trace.push(wcss);
        if new_assignments == assignments {
            break;
        }
        assignments = new_assignments;
    }
    KmeansResult { centroids, assignments, wcss_trace }
}

fn assign_all(points: &[f32], p: usize, q: usize, centroids: &[f32]) -> Vec<usize> {
    if p >= 512 {
        (0..p)
            .into_par_iter()
            .map(|i| nearest(&points[i * q..(i + 1) * q], centroids, q).0)
            .collect()
    } else {
        (0..p).map(|i| nearest(&points[i * q..(i + 1) * q], centroids, q).0).collect()
    }
}

pub fn wcss_of(points: &[f32], q: usize, centroids: &[f32], assignments: &[usize]) -> f64 {
    points
        .chunks_exact(q)
        .zip(assignments)
        .map(|(pt, &a)| sq_dist(pt, &centroids[a * q..(a + 1) * q]))
        .sum()
}

/// k-means++ seeded Lloyd's algorithm over a P x q row-major matrix.
///
/// When `k > p` every point becomes its own centroid and the remaining
/// slots are filled with duplicates of the points farthest from the mean.
pub fn kmeans(points: &[f32], p: usize, q: usize, k: usize, max_iters: usize, seed: u64) -> KmeansResult {
    assert!(p >= 1 && k >= 1 && q >= 1, "kmeans requires P, K, q >= 1");
    assert_eq!(points.len(), p * q);
    if k > p {
        log::warn!("kmeans: K={k} exceeds P={p}; duplicating farthest points");
        let mut centroids = points.to_vec();
        let mut mean = vec![0.0f32; q];
        for pt in points.chunks_exact(q) {
            for (m, &v) in mean.iter_mut().zip(pt) {
                *m += v / p as f32;
            }
        }
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            let da = sq_dist(&points[a * q..(a + 1) * q], &mean);
            let db = sq_dist(&points[b * q..(b + 1) * q], &mean);
            db.partial_cmp(&da).unwrap().then(a.cmp(&b))
        });
        for extra in 0..(k - p) {
            let i = order[extra % p];
            centroids.extend_from_slice(&points[i * q..(i + 1) * q]);
        }
        let assignments = assign_all(points, p, q, &centroids);
        let wcss = wcss_of(points, q, &centroids, &assignments);
        return KmeansResult { centroids, assignments, wcss_trace: vec![wcss] };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = seed_centroids(points, p, q, k, &mut rng);
    lloyd(points, p, q, init, max_iters)
}
