//! Retrieval metrics: mean average precision and CMC under the
//! same-identity-same-camera exclusion rule.

use std::fmt;

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 10];

/// Cosine distance between unit-norm query and gallery rows.
pub fn retrieval_distance(query: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if query.cols() != gallery.cols() {
        return shape_err(format!(
            "query dim {} vs gallery dim {}",
            query.cols(),
            gallery.cols()
        ));
    }
    if !query.is_finite() || !gallery.is_finite() {
        return Err(Error::Data("non-finite feature value".into()));
    }
    let g = gallery.rows();
    let rows: Vec<Vec<f64>> = (0..query.rows())
        .into_par_iter()
        .map(|i| {
            let q = query.row(i);
            (0..g)
                .map(|j| {
                    let dot: f64 = q.iter().zip(gallery.row(j)).map(|(a, b)| a * b).sum();
                    (1.0 - dot).clamp(0.0, 2.0)
                })
                .collect()
        })
        .collect();
    Tensor::stack_rows(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// `(rank, fraction of queries matched within rank)`.
    pub cmc: Vec<(usize, f64)>,
    pub queries_evaluated: usize,
    /// Queries with no valid gallery match after filtering.
    pub queries_skipped: usize,
}

impl RetrievalMetrics {
    pub fn rank(&self, r: usize) -> Option<f64> {
        self.cmc.iter().find(|(k, _)| *k == r).map(|&(_, v)| v)
    }
}

impl fmt::Display for RetrievalMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mAP={:.6}", self.map)?;
        for (r, v) in &self.cmc {
            write!(f, " R{r}={v:.6}")?;
        }
        write!(f, " queries_skipped={}", self.queries_skipped)
    }
}

/// Per-query AP and first-match rank (1-based), or `None` when nothing
/// survives filtering.
fn score_query(dist: &[f64], qid: usize, qcam: usize, g_ids: &[usize], g_cams: &[usize]) -> Option<(f64, usize)> {
    let mut order: Vec<usize> = (0..dist.len())
        .filter(|&j| !(g_ids[j] == qid && g_cams[j] == qcam))
        .collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (pos, &j) in order.iter().enumerate() {
        if g_ids[j] == qid {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos + 1);
        }
    }
    first.map(|r| (precision_sum / hits as f64, r))
}

pub fn cmc_map(
    dist: &Tensor,
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    ranks: &[usize],
) -> Result<RetrievalMetrics> {
    let (q, g) = (dist.rows(), dist.cols());
    if dist.rank() != 2 || q_ids.len() != q || q_cams.len() != q || g_ids.len() != g || g_cams.len() != g {
        return shape_err(format!(
            "distance {:?} with {} / {} query and {} / {} gallery labels",
            dist.shape(),
            q_ids.len(),
            q_cams.len(),
            g_ids.len(),
            g_cams.len()
        ));
    }
    if ranks.contains(&0) {
        return Err(Error::Config("CMC ranks are 1-based".into()));
    }
    let scored: Vec<Option<(f64, usize)>> = (0..q)
        .into_par_iter()
        .map(|i| score_query(dist.row(i), q_ids[i], q_cams[i], g_ids, g_cams))
        .collect();
    let valid: Vec<(f64, usize)> = scored.iter().flatten().copied().collect();
    let n = valid.len();
    let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    Ok(RetrievalMetrics {
        map: frac(1) * valid.iter().map(|(ap, _)| ap).sum::<f64>(),
        cmc: ranks
            .iter()
            .map(|&r| (r, frac(valid.iter().filter(|(_, first)| *first <= r).count())))
            .collect(),
        queries_evaluated: n,
        queries_skipped: q - n,
    })
}
