//! Lloyd's K-Means over embedding vectors.
//!
//! The objective reported everywhere is the mean squared error over all `N`
//! points: `(1/N) Σ_i Σ_{x in cluster i} ||x - c_i||²`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Outcome of one K-Means fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// `[k, d]` cluster centres.
    pub centroids: Tensor<f64>,
    /// Cluster index of every input point.
    pub assignments: Vec<usize>,
    pub mse: f64,
    pub iterations: usize,
    /// Objective after each completed iteration; non-increasing.
    pub mse_history: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for every point by squared Euclidean distance; ties go to
/// the lowest centroid index.
pub fn assign(points: &Tensor<f64>, centroids: &Tensor<f64>) -> Result<Vec<usize>> {
    let (n, d) = points.dims2()?;
    let (k, dc) = centroids.dims2()?;
    if d != dc {
        return Err(Error::shape("assign", points.shape(), centroids.shape()));
    }
    if k == 0 {
        return Err(Error::invalid("empty centroid set"));
    }
    Ok((0..n)
        .map(|i| {
            let p = points.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let dist = squared_distance(p, centroids.row(j));
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Mean over all points of the squared distance to the assigned centroid.
pub fn mse(points: &Tensor<f64>, centroids: &Tensor<f64>, assignments: &[usize]) -> f64 {
    let n = assignments.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| squared_distance(points.row(i), centroids.row(c)))
        .sum();
    total / n as f64
}

fn means(points: &Tensor<f64>, assignments: &[usize], k: usize) -> Tensor<f64> {
    let d = points.shape()[1];
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        let inv = 1.0 / counts[c] as f64;
        for s in &mut sums[c * d..(c + 1) * d] {
            *s *= inv;
        }
    }
    Tensor::new(&[k, d], sums).expect("k and d are positive")
}

/// Moves points into empty clusters: each empty cluster takes the point
/// farthest from its current centroid among clusters with two or more members.
fn repair_empty(points: &Tensor<f64>, centroids: &Tensor<f64>, assignments: &mut [usize], k: usize) {
    let mut counts = vec![0usize; k];
    for &c in assignments.iter() {
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut pick = None;
        let mut pick_d = f64::NEG_INFINITY;
        for (i, &c) in assignments.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let dist = squared_distance(points.row(i), centroids.row(c));
            if dist > pick_d {
                pick_d = dist;
                pick = Some(i);
            }
        }
        // k <= N guarantees a donor cluster with at least two members.
        let i = pick.expect("a cluster with two or more members exists");
        counts[assignments[i]] -= 1;
        assignments[i] = empty;
        counts[empty] = 1;
    }
}

/// Fits `k` clusters with Lloyd's iteration.
///
/// Initial centres are `k` distinct input points drawn with the seed. Each
/// iteration assigns points to their nearest centre, refills empty clusters,
/// then moves each centre to the mean of its members. Stops once no centre
/// moves by `tol` or more, or after `max_iter` iterations.
pub fn kmeans_fit(points: &Tensor<f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterResult> {
    let (n, d) = points.dims2()?;
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} available points")));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("kmeans_fit input"));
    }
    let max_iter = max_iter.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<f64> = sample(&mut rng, n, k)
        .into_iter()
        .flat_map(|i| points.row(i).to_vec())
        .collect();
    let mut centroids = Tensor::new(&[k, d], init)?;
    let mut assignments = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        assignments = assign(points, &centroids)?;
        repair_empty(points, &centroids, &mut assignments, k);
        let updated = means(points, &assignments, k);
        let movement = (0..k)
            .map(|c| squared_distance(updated.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(mse(points, &centroids, &assignments));
        if movement < tol {
            break;
        }
    }
    Ok(ClusterResult {
        mse: *history.last().expect("at least one iteration"),
        centroids,
        assignments,
        iterations,
        mse_history: history,
    })
}
