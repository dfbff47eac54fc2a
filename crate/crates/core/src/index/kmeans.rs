use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::util::rng_for;

const CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub assignment: Vec<usize>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
}

impl KMeans {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().expect("at least one assignment")
    }
}

fn sq_norms(x: ArrayView2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r))
}

/// Index and squared distance of the nearest centroid for every point.
///
/// Candidates come from `‖x‖² + ‖c‖² − 2x·c`; the winner's distance is then
/// recomputed exactly so sums do not carry the expansion's cancellation error.
pub(crate) fn nearest(
    points: ArrayView2<f64>,
    centroids: ArrayView2<f64>,
) -> (Vec<usize>, Vec<f64>) {
    let c_norms = sq_norms(centroids);
    let mut idx = Vec::with_capacity(points.nrows());
    let mut dist = Vec::with_capacity(points.nrows());
    for start in (0..points.nrows()).step_by(CHUNK) {
        let block = points.slice(s![start..(start + CHUNK).min(points.nrows()), ..]);
        let cross = block.dot(&centroids.t());
        for (i, row) in cross.outer_iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (j, &xc) in row.iter().enumerate() {
                let d = c_norms[j] - 2.0 * xc;
                if d < best.1 {
                    best = (j, d);
                }
            }
            let p = block.row(i);
            let c = centroids.row(best.0);
            let exact: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            idx.push(best.0);
            dist.push(exact);
        }
    }
    (idx, dist)
}

fn seed_plus_plus(points: ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let (n, dim) = points.dim();
    let mut centroids = Array2::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .outer_iter()
        .map(|p| {
            p.iter()
                .zip(points.row(first))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        let cr = points.row(pick);
        for (p, d) in points.outer_iter().zip(d2.iter_mut()) {
            let nd: f64 = p.iter().zip(cr).map(|(a, b)| (a - b) * (a - b)).sum();
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeding.
///
/// Stops early once an assignment repeats. An empty cluster is re-seeded with
/// the point farthest from its current centroid.
pub fn kmeans(points: ArrayView2<f64>, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::config(format!(
            "k-means needs 1 <= k <= points, got k={k} with {n} points"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("k-means input contains non-finite values"));
    }
    let mut rng = rng_for(seed, "kmeans");
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let (mut assignment, mut dist) = nearest(points, centroids.view());
    let mut sse_history = vec![dist.iter().sum()];
    for _ in 0..iters {
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &a) in points.outer_iter().zip(&assignment) {
            let mut row = sums.row_mut(a);
            row += &p;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&mean);
            }
        }
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..n)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("non-empty");
            centroids.row_mut(j).assign(&points.row(far));
            dist[far] = 0.0;
        }
        let (next, next_dist) = nearest(points, centroids.view());
        sse_history.push(next_dist.iter().sum());
        let stable = next == assignment;
        assignment = next;
        dist = next_dist;
        if stable {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        sse_history,
    })
}
