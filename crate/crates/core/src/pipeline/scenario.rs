//! End-to-end multi-source experiment: pretrain every source and a
//! blended-pool baseline, adapt one expert per source, merge, train the
//! gate, and score every variant on the target.

use rayon::prelude::*;

use super::{
    adapt_expert, build_merged_model, ClusterConfig, evaluate, pretrain_source, train_gate, Encoder, ExpertModel, SourceModel,
    TrainConfig,
};
use crate::data::{generate_domains, DomainRecipe, DomainSpec, Sample, SyntheticDataset};
use crate::error::Result;
use crate::gating::deltas_by_layer;
use crate::lora::{average_backbones, LoraConfig};
use crate::model::BackboneConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub backbone: BackboneConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub latent_dim: usize,
    pub sources: Vec<DomainRecipe>,
    pub target: DomainRecipe,
}

/// Labeled source domain defaults.
pub fn default_source_recipe() -> DomainRecipe {
    DomainRecipe {
        n_identities: 32,
        eval_identities: 0,
        samples_per_identity: 16,
        n_cameras: 4,
        shift: 0.3,
        stretch: 1.5,
        bias_sigma: 0.5,
        camera_shift: 0.1,
        camera_bias_sigma: 0.1,
        noise_sigma: 0.2,
    }
}

/// Unlabeled target domain defaults. 40 training identities keep the
/// same-identity pair fraction (about 1/40) well above the clustering
/// radius percentile.
pub fn default_target_recipe() -> DomainRecipe {
    DomainRecipe {
        n_identities: 100,
        eval_identities: 60,
        ..default_source_recipe()
    }
}

/// Training schedule for the synthetic scenario. Losses are summed over
/// the batch, so the step size sits well below the generic default.
pub fn default_scenario_train() -> TrainConfig {
    TrainConfig {
        lr: 0.001,
        epochs_source: 70,
        cluster: ClusterConfig {
            eps_percentile: 1.0,
            ..ClusterConfig::default()
        },
        ..TrainConfig::default()
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            lora: LoraConfig::default(),
            train: default_scenario_train(),
            latent_dim: 16,
            sources: vec![default_source_recipe(); 3],
            target: default_target_recipe(),
        }
    }
}

impl ScenarioConfig {
    /// Domain specs in order sources…, target. Domain `i` draws its
    /// transforms from `seed · 1000 + i`.
    pub fn specs(&self, seed: u64) -> Result<Vec<DomainSpec>> {
        self.sources
            .iter()
            .chain(std::iter::once(&self.target))
            .enumerate()
            .map(|(i, r)| r.build(self.backbone.input_dim, seed.wrapping_mul(1000).wrapping_add(i as u64)))
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<SyntheticDataset>> {
        generate_domains(seed, &self.specs(seed)?, self.latent_dim, self.backbone.content_tokens())
    }
}

/// Target mAP of every variant.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendOutcome {
    pub seed: u64,
    /// Averaged source backbones, no target training.
    pub averaged: f64,
    /// One backbone pretrained on the pooled sources, no target training.
    pub blended: f64,
    pub source_only: Vec<f64>,
    pub adapted: Vec<f64>,
    /// Merged model with uniform coefficients.
    pub lora_avg: f64,
    pub gated: f64,
}

/// Runs the whole comparison for one seed. Data and training share it.
pub fn run_trend(cfg: &ScenarioConfig, seed: u64) -> Result<TrendOutcome> {
    let train = TrainConfig { seed, ..cfg.train };
    let domains = cfg.generate(seed)?;
    let (target, sources) = domains.split_last().expect("at least the target domain");

    let mut jobs: Vec<(usize, Vec<Sample>)> = sources.iter().map(|d| (d.domain, d.train.clone())).collect();
    let pooled: Vec<Sample> = sources.iter().flat_map(|d| d.train.iter().cloned()).collect();
    jobs.push((sources.len(), pooled));
    let mut trained = jobs
        .par_iter()
        .map(|(id, samples)| pretrain_source(samples, *id, cfg.backbone, &train, &mut |_| ()).map(|r| r.model))
        .collect::<Result<Vec<SourceModel>>>()?;
    let blend = trained.pop().expect("blend job present");
    let models = trained;

    let experts = models
        .par_iter()
        .map(|m| adapt_expert(m, &target.train, &cfg.lora, &train, &mut |_| ()).map(|r| r.model))
        .collect::<Result<Vec<ExpertModel>>>()?;

    let backbones: Vec<_> = models.iter().map(|m| m.backbone.clone()).collect();
    let averaged_backbone = average_backbones(&backbones)?;
    let averaged = evaluate(&Encoder::Plain(&averaged_backbone), target)?.map;
    let blended = evaluate(&Encoder::source(&blend), target)?.map;
    let source_only = models
        .iter()
        .map(|m| evaluate(&Encoder::source(m), target).map(|r| r.map))
        .collect::<Result<Vec<_>>>()?;
    let adapted = experts
        .iter()
        .map(|e| evaluate(&Encoder::expert(e), target).map(|r| r.map))
        .collect::<Result<Vec<_>>>()?;

    let merged = build_merged_model(&models, &experts)?;
    let deltas = deltas_by_layer(&merged.experts, &cfg.backbone)?;
    let lora_avg = evaluate(&Encoder::gated(&merged, &deltas), target)?.map;
    let gated_model = train_gate(merged, &target.train, &train, &mut |_| ())?.model;
    let gated = evaluate(&Encoder::gated(&gated_model, &deltas), target)?.map;

    Ok(TrendOutcome {
        seed,
        averaged,
        blended,
        source_only,
        adapted,
        lora_avg,
        gated,
    })
}
