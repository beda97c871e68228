//! Identity losses, batch-hard triplet mining and identity-balanced
//! (P identities × K samples) batch sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{row_distance, Tape, Triplet, Var};
use crate::tensor::{log_sum_exp, Tensor};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// `−log softmax(logits)[y]`.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::Index(format!("label {y} with {} classes", logits.len())));
    }
    Ok(log_sum_exp(logits) - logits[y])
}

/// `max{0, m + ‖a − p‖ − ‖a − n‖}`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    let dist = |u: &[f64], v: &[f64]| {
        u.iter()
            .zip(v)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    (margin + dist(anchor, positive) - dist(anchor, negative)).max(0.0)
}

/// One triplet per anchor: the farthest same-label row and the nearest
/// different-label row, ties to the lowest index.
pub fn batch_hard_mine(features: &Tensor, labels: &[usize]) -> Result<Vec<Triplet>> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} features", labels.len())));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Sampling(format!("label {l} appears once in the batch")));
    }
    if counts.len() < 2 {
        return Err(Error::Sampling("batch holds a single identity".into()));
    }
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = row_distance(features, a, j);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (Some((p, _)), Some((q, _))) = (pos, neg) else {
            unreachable!("counts checked above");
        };
        out.push(Triplet {
            anchor: a,
            positive: p,
            negative: q,
        });
    }
    Ok(out)
}

/// `Σ CE(logits_b, y_b) + λ Σ triplet` over batch-hard triplets of `features`.
pub fn combined_loss(
    logits: &Tensor,
    labels: &[usize],
    features: &Tensor,
    margin: f64,
    lambda: f64,
) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        ce += cross_entropy(logits.row(i), y)?;
    }
    let triplets = batch_hard_mine(features, labels)?;
    let tri: f64 = triplets
        .iter()
        .map(|t| {
            triplet_loss(
                features.row(t.anchor),
                features.row(t.positive),
                features.row(t.negative),
                margin,
            )
        })
        .sum();
    Ok(ce + lambda * tri)
}

/// Same as [`combined_loss`] but recorded on `tape`.
pub fn combined_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    features: Var,
    margin: f64,
    lambda: f64,
) -> Result<LossParts> {
    let triplets = batch_hard_mine(tape.value(features), labels)?;
    let ce = tape.cross_entropy_sum(logits, labels)?;
    let tri = tape.triplet_sum(features, &triplets, margin)?;
    let weighted = tape.scale(tri, lambda);
    let total = tape.add(ce, weighted)?;
    Ok(LossParts {
        total,
        cross_entropy: ce,
        triplet: tri,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub cross_entropy: Var,
    pub triplet: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Identities per batch.
    pub identities: usize,
    /// Samples per identity.
    pub instances: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            identities: 4,
            instances: 4,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.identities * self.instances
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.instances < 2 {
            return Err(Error::Config(format!(
                "P and K must both be at least 2, got P={} K={}",
                self.identities, self.instances
            )));
        }
        Ok(())
    }
}

/// Identity-balanced batches for one epoch, as indices into `labels`.
///
/// Each identity's samples are shuffled and cut into chunks of K (the last
/// chunk topped up by sampling with replacement). Batches repeatedly take
/// one chunk from each of P distinct identities until fewer than P
/// identities have chunks left.
pub fn pk_sample(labels: &[usize], cfg: &SamplerConfig, epoch: u64) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < cfg.identities {
        return Err(Error::Sampling(format!(
            "{} identities available, batches need {}",
            by_id.len(),
            cfg.identities
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch);

    let k = cfg.instances;
    let mut chunks: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (&id, members) in &by_id {
        let mut pool = members.clone();
        pool.shuffle(&mut rng);
        while pool.len() % k != 0 {
            let extra = members[rng.random_range(0..members.len())];
            pool.push(extra);
        }
        chunks.insert(id, pool.chunks(k).map(<[usize]>::to_vec).collect());
    }

    let mut batches = Vec::new();
    loop {
        let mut available: Vec<usize> = chunks
            .iter()
            .filter(|(_, c)| !c.is_empty())
            .map(|(&id, _)| id)
            .collect();
        if available.len() < cfg.identities {
            break;
        }
        available.shuffle(&mut rng);
        let mut batch = Vec::with_capacity(cfg.batch_size());
        for id in &available[..cfg.identities] {
            let chunk = chunks.get_mut(id).and_then(Vec::pop).expect("non-empty");
            batch.extend(chunk);
        }
        batches.push(batch);
    }
    Ok(batches)
}
