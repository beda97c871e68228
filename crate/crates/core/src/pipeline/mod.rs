//! Training procedures: supervised source pretraining, per-expert adapter
//! adaptation on clustering pseudo-labels, and gate training over the
//! averaged backbone.

pub mod artifacts;
mod encode;
pub mod scenario;
mod train;

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gating::GateParams;
use crate::lora::ExpertAdapterSet;
use crate::losses::{SamplerConfig, DEFAULT_LAMBDA, DEFAULT_MARGIN};
use crate::model::{BackboneParams, HeadParams};
use crate::pseudo::{DEFAULT_EPS_PERCENTILE, DEFAULT_MIN_PTS};
use crate::tensor::Tensor;

pub use encode::{evaluate, normalized_features, Encoder};
pub use train::{
    adapt_expert, build_merged_model, pretrain_source, train_gate, AdaptReport, GateReport, PretrainReport,
};

pub const DEFAULT_LOGIT_SCALE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub min_pts: usize,
    pub eps_percentile: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            min_pts: DEFAULT_MIN_PTS,
            eps_percentile: DEFAULT_EPS_PERCENTILE,
        }
    }
}

/// When the target classifier is rebuilt from cluster centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadReinit {
    /// Every clustering round. Cluster ids are not stable between rounds,
    /// so a kept classifier can point its columns at the wrong clusters.
    #[default]
    EveryEpoch,
    /// Only when the number of clusters differs from the previous round.
    OnCountChange,
}

impl HeadReinit {
    pub fn due(self, previous: Option<usize>, clusters: usize) -> bool {
        match self {
            HeadReinit::EveryEpoch => true,
            HeadReinit::OnCountChange => previous != Some(clusters),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs_source: usize,
    pub epochs_adapt: usize,
    pub epochs_gate: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub margin: f64,
    pub sampler: SamplerConfig,
    pub cluster: ClusterConfig,
    /// Norm of every classifier column at initialization, random or from
    /// cluster centroids. Logits of the cosine classifier are bounded by it,
    /// so it acts as an inverse softmax temperature.
    pub logit_scale: f64,
    pub head_reinit: HeadReinit,
    /// Train the batch-norm affine of the head alongside the classifier.
    pub train_head_affine: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_source: 30,
            epochs_adapt: 10,
            epochs_gate: 1,
            lr: 0.008,
            momentum: 0.9,
            lambda: DEFAULT_LAMBDA,
            margin: DEFAULT_MARGIN,
            sampler: SamplerConfig::default(),
            cluster: ClusterConfig::default(),
            logit_scale: DEFAULT_LOGIT_SCALE,
            head_reinit: HeadReinit::default(),
            train_head_affine: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lambda >= 0.0 && self.margin >= 0.0) {
            return Err(Error::Config("loss weight and margin must be nonnegative".into()));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config("centroid scale must be positive".into()));
        }
        if self.cluster.min_pts == 0 || !(0.0..=100.0).contains(&self.cluster.eps_percentile) {
            return Err(Error::Config(format!("invalid clustering settings {:?}", self.cluster)));
        }
        self.sampler.validate()
    }

    /// Independent sub-seed for one purpose (`tag`) and instance.
    pub fn derive_seed(&self, tag: u64, index: u64) -> u64 {
        derive_seed(self.seed, tag, index)
    }
}

pub(crate) fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.set_word_pos(u128::from(index) * 16);
    rng.next_u64()
}

pub mod seed_tag {
    pub const BACKBONE_INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const ADAPTER_INIT: u64 = 4;
    pub const DROPOUT: u64 = 5;
}

/// SGD with classical momentum: `v ← μ v + g`, `θ ← θ − η v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `params` and `grads` must keep the same order across calls.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if !p.same_shape(g) || !v.same_shape(g) {
                return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// One epoch of any stage. `loss` is the mean per-sample loss, `None` when
/// the epoch was skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub clusters: usize,
    pub noise: usize,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.loss {
            Some(l) => write!(f, "epoch={} loss={l:.6}", self.epoch)?,
            None => write!(f, "epoch={} loss=nan", self.epoch)?,
        }
        write!(f, " clusters={} noise={}", self.clusters, self.noise)
    }
}

/// A pretrained source model.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub source_id: usize,
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

/// A source backbone with its target-adapted adapters and head.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub backbone: BackboneParams,
    pub adapters: ExpertAdapterSet,
    pub head: HeadParams,
}

/// Averaged backbone, frozen experts, per-layer gates and a target head.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub backbone: BackboneParams,
    pub experts: Vec<ExpertAdapterSet>,
    pub gates: GateParams,
    pub head: HeadParams,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_matches_hand_rolled_momentum() {
        let mut sgd = Sgd::new(0.1, 0.9);
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.5, 1.0]);
        sgd.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.1]);
        sgd.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        // v = 0.9·0.5 + 0.5 = 0.95
        assert!((p.data()[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { margin: -0.1, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn derived_seeds_differ_by_tag_and_index() {
        let c = TrainConfig::default();
        let a = c.derive_seed(1, 0);
        assert_eq!(a, c.derive_seed(1, 0));
        assert_ne!(a, c.derive_seed(2, 0));
        assert_ne!(a, c.derive_seed(1, 1));
    }

    #[test]
    fn reinit_policies() {
        assert!(HeadReinit::EveryEpoch.due(Some(5), 5));
        assert!(!HeadReinit::OnCountChange.due(Some(5), 5));
        assert!(HeadReinit::OnCountChange.due(Some(5), 6));
        assert!(HeadReinit::OnCountChange.due(None, 5));
    }

    #[test]
    fn progress_line_format() {
        let s = EpochStats {
            epoch: 3,
            loss: Some(1.25),
            clusters: 12,
            noise: 4,
        };
        assert_eq!(s.to_string(), "epoch=3 loss=1.250000 clusters=12 noise=4");
    }
}
