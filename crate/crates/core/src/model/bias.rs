//! Cluster-conditioned attention bias.
//!
//! For head `h`, the additive pre-softmax bias is
//!
//! ```text
//! bias[i][j] = gain_same[h] * same(i, j) + gain_affinity[h] * cos(e_j, c_{h mod K})
//! ```
//!
//! where `same(i, j)` is 1 when tokens `i` and `j` share a cluster and `c` are
//! the K-Means centroids of the sentence's token embeddings. Cluster
//! assignments and centroids are constants of the forward pass; only the two
//! per-head gains are trained, and both start at zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_fit, ClusterResult};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Params, Scalar, Tensor, Var};

/// Which bias terms the encoder self-attention receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    Off,
    SameCluster,
    CentroidAffinity,
    Both,
}

impl ClusterMode {
    pub fn uses_same(self) -> bool {
        matches!(self, ClusterMode::SameCluster | ClusterMode::Both)
    }

    pub fn uses_affinity(self) -> bool {
        matches!(self, ClusterMode::CentroidAffinity | ClusterMode::Both)
    }
}

impl fmt::Display for ClusterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMode::Off => "off",
            ClusterMode::SameCluster => "same_cluster",
            ClusterMode::CentroidAffinity => "centroid_affinity",
            ClusterMode::Both => "both",
        })
    }
}

impl FromStr for ClusterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ClusterMode::Off),
            "same_cluster" => Ok(ClusterMode::SameCluster),
            "centroid_affinity" => Ok(ClusterMode::CentroidAffinity),
            "both" => Ok(ClusterMode::Both),
            other => Err(Error::invalid(format!(
                "unknown cluster mode {other:?} (expected off, same_cluster, centroid_affinity or both)"
            ))),
        }
    }
}

/// Learnable per-head gains of one encoder self-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterBiasParams {
    pub gain_same: ParamId,
    pub gain_affinity: ParamId,
}

impl ClusterBiasParams {
    pub fn register<T: Scalar>(params: &mut Params<T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            gain_same: params.add(format!("{prefix}.gain_same"), Tensor::zeros(&[heads]))?,
            gain_affinity: params.add(format!("{prefix}.gain_affinity"), Tensor::zeros(&[heads]))?,
        })
    }
}

/// Runs K-Means on the position-free embeddings of one sentence with
/// `min(k, n)` clusters.
///
/// Clusters come back ordered by descending centroid norm (ties by K-Means
/// index), so head `h` meets the same kind of cluster in every sentence
/// instead of whichever one the random initialization happened to label `h`.
pub fn cluster_source(embeddings: &Tensor<f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterResult> {
    let (n, d) = embeddings.dims2()?;
    let mut r = kmeans_fit(embeddings, k.min(n).max(1), seed, max_iter, tol)?;
    let norm = |c: usize| r.centroids.row(c).iter().map(|x| x * x).sum::<f64>();
    let mut order: Vec<usize> = (0..r.k()).collect();
    order.sort_by(|&a, &b| norm(b).total_cmp(&norm(a)).then(a.cmp(&b)));
    let mut rank = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let data = order.iter().flat_map(|&c| r.centroids.row(c).to_vec()).collect();
    r.centroids = Tensor::new(&[order.len(), d], data)?;
    for a in &mut r.assignments {
        *a = rank[*a];
    }
    Ok(r)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `same[i][j] = 1` when both tokens sit in the same cluster.
pub fn same_cluster_matrix(assignments: &[usize]) -> Tensor<f64> {
    let n = assignments.len();
    let data = (0..n * n)
        .map(|x| f64::from(u8::from(assignments[x / n] == assignments[x % n])))
        .collect();
    Tensor::new(&[n, n], data).expect("n > 0")
}

/// `affinity[i][j] = cos(embeddings[j], centroid)`, identical for every row.
pub fn affinity_matrix(embeddings: &Tensor<f64>, centroid: &[f64]) -> Tensor<f64> {
    let n = embeddings.shape()[0];
    let col: Vec<f64> = (0..n).map(|j| cosine(embeddings.row(j), centroid)).collect();
    let data = (0..n).flat_map(|_| col.iter().copied()).collect();
    Tensor::new(&[n, n], data).expect("n > 0")
}

/// Bias matrix of one head for explicit gain values.
pub fn cluster_bias(
    result: &ClusterResult,
    embeddings: &Tensor<f64>,
    head: usize,
    gain_same: &[f64],
    gain_affinity: &[f64],
    mode: ClusterMode,
) -> Result<Tensor<f64>> {
    if head >= gain_same.len() || head >= gain_affinity.len() {
        return Err(Error::invalid(format!("head {head} has no gain")));
    }
    let (n, _) = embeddings.dims2()?;
    if result.assignments.len() != n {
        return Err(Error::shape("cluster_bias", &[result.assignments.len()], embeddings.shape()));
    }
    let mut bias = vec![0.0; n * n];
    if mode.uses_same() {
        let s = same_cluster_matrix(&result.assignments);
        for (b, &v) in bias.iter_mut().zip(s.data()) {
            *b += gain_same[head] * v;
        }
    }
    if mode.uses_affinity() {
        let a = affinity_matrix(embeddings, result.centroids.row(head % result.k()));
        for (b, &v) in bias.iter_mut().zip(a.data()) {
            *b += gain_affinity[head] * v;
        }
    }
    Tensor::new(&[n, n], bias)
}

/// Constant bias ingredients of one (possibly padded) source sentence.
///
/// Rows and columns of padding positions are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterFeatures<T = f32> {
    pub same: Tensor<T>,
    /// One matrix per head.
    pub affinity: Vec<Tensor<T>>,
}

impl<T: Scalar> ClusterFeatures<T> {
    /// Builds features from a clustering of the valid positions of a sentence
    /// of length `valid.len()`; `embeddings` holds only the valid rows.
    pub fn from_clusters(result: &ClusterResult, embeddings: &Tensor<f64>, valid: &[bool], heads: usize) -> Result<Self> {
        let n = valid.len();
        let positions: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
        if positions.len() != result.assignments.len() {
            return Err(Error::shape("ClusterFeatures", &[positions.len()], &[result.assignments.len()]));
        }
        let scatter = |compact: &Tensor<f64>| -> Result<Tensor<T>> {
            let m = positions.len();
            let mut full = vec![T::zero(); n * n];
            for (a, &i) in positions.iter().enumerate() {
                for (b, &j) in positions.iter().enumerate() {
                    full[i * n + j] = T::from_f64(compact.data()[a * m + b]);
                }
            }
            Tensor::new(&[n, n], full)
        };
        let same = scatter(&same_cluster_matrix(&result.assignments))?;
        let affinity = (0..heads)
            .map(|h| scatter(&affinity_matrix(embeddings, result.centroids.row(h % result.k()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { same, affinity })
    }

    /// Per-head bias variables; gradients reach only the gains.
    pub fn bias_vars(&self, g: &mut Graph<'_, T>, params: &ClusterBiasParams, mode: ClusterMode) -> Result<Vec<Var>> {
        let gs = g.param(params.gain_same)?;
        let ga = g.param(params.gain_affinity)?;
        let mut out = Vec::with_capacity(self.affinity.len());
        for (h, aff) in self.affinity.iter().enumerate() {
            let bias = match (mode.uses_same(), mode.uses_affinity()) {
                (true, true) => {
                    let s = g.scale_const(gs, h, &self.same)?;
                    let a = g.scale_const(ga, h, aff)?;
                    g.add(s, a)?
                }
                (true, false) => g.scale_const(gs, h, &self.same)?,
                (false, true) => g.scale_const(ga, h, aff)?,
                (false, false) => return Err(Error::invalid("cluster bias requested with cluster mode off")),
            };
            out.push(bias);
        }
        Ok(out)
    }
}
