//! Density clustering of target features into pseudo-identities.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label of an unclustered sample.
pub const NOISE: i64 = -1;

pub const DEFAULT_MIN_PTS: usize = 4;
pub const DEFAULT_EPS_PERCENTILE: f64 = 2.0;

/// Per-sample cluster ids with noise marked as [`NOISE`]. Ids are
/// contiguous, every id is occupied, and ids are ordered by the smallest
/// member index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub labels: Vec<i64>,
    pub n_clusters: usize,
    pub epoch: usize,
}

impl PseudoLabelSet {
    pub fn noise_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == NOISE).collect()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// `(sample index, cluster id)` of every clustered sample.
    pub fn clustered(&self) -> (Vec<usize>, Vec<usize>) {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != NOISE)
            .map(|(i, &l)| (i, l as usize))
            .unzip()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            if l != NOISE {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }
}

/// Cosine distance `1 − ⟨zᵢ, zⱼ⟩` between rows assumed unit-norm, clamped to
/// `[0, 2]` with an exactly zero diagonal.
pub fn pairwise_distance(features: &Tensor) -> Result<Tensor> {
    if !features.is_finite() {
        return Err(Error::Data("non-finite feature value".into()));
    }
    let n = features.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = features.row(i);
            (0..n)
                .map(|j| {
                    if i == j {
                        return 0.0;
                    }
                    let (a, b) = if i < j { (zi, features.row(j)) } else { (features.row(j), zi) };
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    (1.0 - dot).clamp(0.0, 2.0)
                })
                .collect()
        })
        .collect();
    Tensor::stack_rows(&rows)
}

fn check_distance(dist: &Tensor) -> Result<usize> {
    let n = dist.rows();
    if dist.rank() != 2 || dist.cols() != n {
        return Err(Error::Data(format!("distance matrix {:?} is not square", dist.shape())));
    }
    if !dist.is_finite() {
        return Err(Error::Data("non-finite distance".into()));
    }
    for i in 0..n {
        for j in i + 1..n {
            if dist.get(i, j) != dist.get(j, i) {
                return Err(Error::Data(format!("distance matrix asymmetric at ({i}, {j})")));
            }
        }
    }
    Ok(n)
}

/// Linear-interpolated percentile of the distinct-pair distances.
pub fn select_eps(dist: &Tensor, percentile: f64) -> Result<f64> {
    let n = check_distance(dist)?;
    if n < 2 {
        return Err(Error::Data("need at least two points to pick a radius".into()));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Config(format!("percentile {percentile} outside [0, 100]")));
    }
    let mut off: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| dist.get(i, j))
        .collect();
    off.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (off.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(off[lo] + (pos - lo as f64) * (off[hi] - off[lo]))
}

/// DBSCAN on a precomputed distance matrix.
///
/// Core points have at least `min_pts` points (self included) within `eps`.
/// Clusters are the eps-connected components of core points, numbered by
/// smallest core index; a border point joins the lowest-numbered adjacent
/// cluster. The result is canonically relabeled.
pub fn dbscan(dist: &Tensor, eps: f64, min_pts: usize) -> Result<PseudoLabelSet> {
    let n = check_distance(dist)?;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("radius must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::Config("min_pts must be at least 1".into()));
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0i64;
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        labels[seed] = next;
        let mut stack = vec![seed];
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && labels[q] == NOISE {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = neighbors[i]
                .iter()
                .filter(|&&j| core[j])
                .map(|&j| labels[j])
                .min()
                .unwrap_or(NOISE);
        }
    }
    Ok(relabel_contiguous(&labels))
}

/// Renumbers clusters `0..k` by smallest member index; noise stays noise.
pub fn relabel_contiguous(labels: &[i64]) -> PseudoLabelSet {
    let mut map = std::collections::HashMap::new();
    let labels: Vec<i64> = labels
        .iter()
        .map(|&l| {
            if l < 0 {
                NOISE
            } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }
        })
        .collect();
    PseudoLabelSet {
        labels,
        n_clusters: map.len(),
        epoch: 0,
    }
}

/// Distances, percentile radius and DBSCAN in one call.
pub fn cluster_features(features: &Tensor, percentile: f64, min_pts: usize, epoch: usize) -> Result<PseudoLabelSet> {
    let dist = pairwise_distance(features)?;
    let eps = select_eps(&dist, percentile)?;
    // A zero radius (duplicated features) still has to admit duplicates.
    let eps = eps.max(f64::MIN_POSITIVE);
    let mut set = dbscan(&dist, eps, min_pts)?;
    set.epoch = epoch;
    Ok(set)
}
