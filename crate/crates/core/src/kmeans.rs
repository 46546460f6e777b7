//! Seeded k-means++ initialisation followed by Lloyd iterations (squared
//! Euclidean distance). Shared by the per-image baseline, the VLAD dictionary
//! and the PQ sub-codebooks.
//!
//! The assignment step is a per-point map and may run in parallel; centroid
//! updates accumulate in point order, so results are identical for any
//! thread count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::par;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    /// Cluster of each point; the centroids are the means of these clusters.
    pub assignments: Vec<usize>,
    /// Indices picked by k-means++.
    pub init_indices: Vec<usize>,
    /// Within-cluster SSE after each update step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }
}

/// Nearest centroid by squared distance; ties go to the lowest index.
pub fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = linalg::sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub fn kmeans(points: &[f32], dim: usize, cfg: KMeansConfig) -> Result<KMeansResult> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::invalid("points must be a non-empty multiple of dim"));
    }
    let n = points.len() / dim;
    if cfg.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < cfg.k {
        return Err(Error::invalid(format!(
            "k-means needs at least k={} points, got {n}",
            cfg.k
        )));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let init_indices = kmeans_plus_plus(points, dim, cfg.k, cfg.seed);
    let mut centroids: Vec<f32> = init_indices.iter().flat_map(|&i| row(i).to_vec()).collect();

    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..cfg.max_iters.max(1) {
        let step = par::map_range(n, |i| nearest(row(i), &centroids, dim));
        let mut next: Vec<usize> = step.iter().map(|s| s.0).collect();
        let mut dist: Vec<f32> = step.iter().map(|s| s.1).collect();
        let repaired = repair_empty(points, dim, &mut centroids, &mut next, &mut dist, cfg.k);

        if !repaired && next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        iterations += 1;
        update_centroids(points, dim, &assignments, &mut centroids);
        sse_history.push(sse(points, dim, &assignments, &centroids));
    }
    if sse_history.is_empty() {
        sse_history.push(sse(points, dim, &assignments, &centroids));
    }

    Ok(KMeansResult {
        dim,
        centroids,
        assignments,
        init_indices,
        sse_history,
        iterations,
        converged,
    })
}

fn kmeans_plus_plus(points: &[f32], dim: usize, k: usize, seed: u64) -> Vec<usize> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = rng::rng(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];

    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = par::map_range(n, |i| linalg::sq_dist(row(i), row(first)) as f64);

    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` at the very top of the range.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every point coincides with a chosen centre.
            taken.iter().position(|t| !t).unwrap()
        };
        chosen.push(pick);
        taken[pick] = true;
        let c = row(pick);
        let upd = par::map_range(n, |i| linalg::sq_dist(row(i), c) as f64);
        for (d, u) in d2.iter_mut().zip(upd) {
            if u < *d {
                *d = u;
            }
        }
    }
    chosen
}

/// Give every empty cluster the point farthest from its current centroid,
/// taken from a cluster that keeps at least one member.
fn repair_empty(
    points: &[f32],
    dim: usize,
    centroids: &mut [f32],
    assign: &mut [usize],
    dist: &mut [f32],
    k: usize,
) -> bool {
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    let mut repaired = false;
    for empty in 0..k {
        if counts[empty] != 0 {
            continue;
        }
        let mut best: Option<(usize, f32)> = None;
        for (i, &d) in dist.iter().enumerate() {
            if counts[assign[i]] > 1 && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { break };
        counts[assign[i]] -= 1;
        counts[empty] = 1;
        assign[i] = empty;
        dist[i] = 0.0;
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
        repaired = true;
    }
    repaired
}

fn update_centroids(points: &[f32], dim: usize, assign: &[usize], centroids: &mut [f32]) {
    let k = centroids.len() / dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        let p = &points[i * dim..(i + 1) * dim];
        for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += x as f64;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        for (dst, s) in centroids[c * dim..(c + 1) * dim]
            .iter_mut()
            .zip(&sums[c * dim..(c + 1) * dim])
        {
            *dst = (s * inv) as f32;
        }
    }
}

pub fn sse(points: &[f32], dim: usize, assign: &[usize], centroids: &[f32]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            points[i * dim..(i + 1) * dim]
                .iter()
                .zip(&centroids[a * dim..(a + 1) * dim])
                .map(|(&x, &c)| ((x - c) as f64).powi(2))
                .sum::<f64>()
        })
        .sum()
}
