//! Complete-linkage agglomerative clustering of policies under the HMM distance.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hmm::{hmm_distance_seeded, mix_seed, DistanceConfig, GaussianHmm};
use crate::par::{self, ExecMode};

/// Identifier used for a query policy that is not (yet) part of the model.
pub const QUERY_ID: u64 = u64::MAX;

/// Symmetric matrix with a zero diagonal, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn zeros(n: usize) -> Self {
        DistanceMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, d: f64) {
        self.data[i * self.n + j] = d;
        self.data[j * self.n + i] = d;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    /// Partition of the input indices; members ascending, clusters ordered by first member.
    pub clusters: Vec<Vec<usize>>,
    /// Linkage height of each merge, in merge order.
    pub merge_distances: Vec<f64>,
    pub threshold: f64,
}

impl ClusteringResult {
    pub fn cluster_of(&self, index: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.contains(&index))
    }
}

/// Merges the closest pair (complete linkage) until no pair is within `threshold`.
pub fn complete_linkage(dist: &DistanceMatrix, threshold: f64) -> ClusteringResult {
    let mut clusters: Vec<Vec<usize>> = (0..dist.len()).map(|i| vec![i]).collect();
    let mut merges = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let link = clusters[a]
                    .iter()
                    .flat_map(|&i| clusters[b].iter().map(move |&j| (i, j)))
                    .map(|(i, j)| dist.get(i, j))
                    .fold(0.0f64, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) });
                if best.is_none_or(|(_, _, bd)| link < bd) {
                    best = Some((a, b, link));
                }
            }
        }
        match best {
            Some((a, b, link)) if link <= threshold => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
                clusters[a].sort_unstable();
                merges.push(link);
            }
            _ => break,
        }
    }
    clusters.sort_by_key(|c| c[0]);
    ClusteringResult {
        clusters,
        merge_distances: merges,
        threshold,
    }
}

/// Distance between two identified policies. The sampling seed of each side
/// depends only on the unordered id pair and that side's id, so the value does
/// not depend on argument order or on which other policies are being compared.
pub fn pair_distance(
    id_a: u64,
    a: &GaussianHmm,
    id_b: u64,
    b: &GaussianHmm,
    config: &DistanceConfig,
) -> Result<f64> {
    let (lo, hi) = (id_a.min(id_b), id_a.max(id_b));
    let pair = mix_seed(config.seed, mix_seed(lo, hi));
    hmm_distance_seeded(
        a,
        b,
        config.num_sequences,
        mix_seed(pair, id_a),
        mix_seed(pair, id_b),
    )
}

/// Pairwise distance matrix over identified policies.
pub fn distance_matrix(
    policies: &[(u64, &GaussianHmm)],
    config: &DistanceConfig,
    mode: ExecMode,
) -> Result<DistanceMatrix> {
    let n = policies.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = par::map(mode, &pairs, |&(i, j)| {
        pair_distance(policies[i].0, policies[i].1, policies[j].0, policies[j].1, config)
    });
    let mut m = DistanceMatrix::zeros(n);
    for ((i, j), d) in pairs.into_iter().zip(values) {
        m.set(i, j, d?);
    }
    Ok(m)
}

/// Fraction of items whose cluster's majority label matches their own label.
pub fn purity(clusters: &[Vec<usize>], labels: &[usize]) -> f64 {
    let total: usize = clusters.iter().map(Vec::len).sum();
    if total == 0 {
        return 1.0;
    }
    let mut hits = 0;
    for c in clusters {
        let mut counts = std::collections::BTreeMap::new();
        for &i in c {
            *counts.entry(labels[i]).or_insert(0usize) += 1;
        }
        hits += counts.values().max().copied().unwrap_or(0);
    }
    hits as f64 / total as f64
}
