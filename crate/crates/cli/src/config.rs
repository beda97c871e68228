//! Run configuration document. Every section is optional; missing keys take
//! the library defaults and the resolved document is echoed at startup.

use std::path::{Path, PathBuf};

use sage_core::data::DomainRecipe;
use sage_core::lora::LoraConfig;
use sage_core::losses::SamplerConfig;
use sage_core::model::BackboneConfig;
use sage_core::pipeline::scenario::{default_source_recipe, default_target_recipe, ScenarioConfig};
use sage_core::pipeline::{ClusterConfig, HeadReinit, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of all randomness: data, initialization, sampling, dropout.
    pub seed: u64,
    pub backbone: BackboneSection,
    pub lora: LoraSection,
    pub train: TrainSection,
    pub dbscan: DbscanSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub layers: usize,
    pub dim: usize,
    pub tokens: usize,
    pub heads: usize,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub r: usize,
    pub beta: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadReinitKey {
    EveryEpoch,
    OnCountChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub epochs_source: usize,
    pub epochs_adapt: usize,
    pub epochs_gate: usize,
    pub lambda: f64,
    pub margin: f64,
    /// Identities per batch.
    pub batch_identities: usize,
    /// Samples per identity in a batch.
    pub batch_instances: usize,
    pub logit_scale: f64,
    pub head_reinit: HeadReinitKey,
    pub train_head_affine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanSection {
    pub min_pts: usize,
    pub eps_percentile: f64,
}

/// Domain generator knobs. Absent keys fall back to the source or target
/// defaults depending on where the recipe appears.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_identities: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_identities: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_identity: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_cameras: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stretch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera_shift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera_bias_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub latent_dim: usize,
    pub sources: Vec<RecipeSection>,
    pub target: RecipeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Generated datasets. Relative paths resolve against the config file.
    pub data: PathBuf,
    /// Checkpoints and metric files.
    pub models: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_scenario(&ScenarioConfig::default(), 0)
    }
}

macro_rules! section_default {
    ($ty:ty, $field:ident) => {
        impl Default for $ty {
            fn default() -> Self {
                RunConfig::default().$field
            }
        }
    };
}

section_default!(BackboneSection, backbone);
section_default!(LoraSection, lora);
section_default!(TrainSection, train);
section_default!(DbscanSection, dbscan);
section_default!(DataSection, data);

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            models: PathBuf::from("models"),
        }
    }
}

impl RecipeSection {
    fn full(r: &DomainRecipe) -> Self {
        Self {
            n_identities: Some(r.n_identities),
            eval_identities: Some(r.eval_identities),
            samples_per_identity: Some(r.samples_per_identity),
            n_cameras: Some(r.n_cameras),
            shift: Some(r.shift),
            stretch: Some(r.stretch),
            bias_sigma: Some(r.bias_sigma),
            camera_shift: Some(r.camera_shift),
            camera_bias_sigma: Some(r.camera_bias_sigma),
            noise_sigma: Some(r.noise_sigma),
        }
    }

    fn resolve(&self, base: DomainRecipe) -> DomainRecipe {
        DomainRecipe {
            n_identities: self.n_identities.unwrap_or(base.n_identities),
            eval_identities: self.eval_identities.unwrap_or(base.eval_identities),
            samples_per_identity: self.samples_per_identity.unwrap_or(base.samples_per_identity),
            n_cameras: self.n_cameras.unwrap_or(base.n_cameras),
            shift: self.shift.unwrap_or(base.shift),
            stretch: self.stretch.unwrap_or(base.stretch),
            bias_sigma: self.bias_sigma.unwrap_or(base.bias_sigma),
            camera_shift: self.camera_shift.unwrap_or(base.camera_shift),
            camera_bias_sigma: self.camera_bias_sigma.unwrap_or(base.camera_bias_sigma),
            noise_sigma: self.noise_sigma.unwrap_or(base.noise_sigma),
        }
    }
}

impl RunConfig {
    pub fn from_scenario(s: &ScenarioConfig, seed: u64) -> Self {
        let (b, l, t) = (s.backbone, s.lora, s.train);
        Self {
            seed,
            backbone: BackboneSection {
                layers: b.layers,
                dim: b.dim,
                tokens: b.tokens,
                heads: b.heads,
                input_dim: b.input_dim,
                hidden: b.hidden,
            },
            lora: LoraSection {
                r: l.rank,
                beta: l.beta,
                dropout: l.dropout,
            },
            train: TrainSection {
                lr: t.lr,
                momentum: t.momentum,
                epochs_source: t.epochs_source,
                epochs_adapt: t.epochs_adapt,
                epochs_gate: t.epochs_gate,
                lambda: t.lambda,
                margin: t.margin,
                batch_identities: t.sampler.identities,
                batch_instances: t.sampler.instances,
                logit_scale: t.logit_scale,
                head_reinit: match t.head_reinit {
                    HeadReinit::EveryEpoch => HeadReinitKey::EveryEpoch,
                    HeadReinit::OnCountChange => HeadReinitKey::OnCountChange,
                },
                train_head_affine: t.train_head_affine,
            },
            dbscan: DbscanSection {
                min_pts: t.cluster.min_pts,
                eps_percentile: t.cluster.eps_percentile,
            },
            data: DataSection {
                latent_dim: s.latent_dim,
                sources: s.sources.iter().map(RecipeSection::full).collect(),
                target: RecipeSection::full(&s.target),
            },
            paths: PathsSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Loads a document; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.data, &mut cfg.paths.models] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The document with every recipe key filled in.
    pub fn resolved(&self) -> Self {
        let s = self.scenario();
        Self {
            paths: self.paths.clone(),
            ..Self::from_scenario(&s, self.seed)
        }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        let (b, l, t, d) = (self.backbone, self.lora, self.train, self.dbscan);
        let train = TrainConfig {
            epochs_source: t.epochs_source,
            epochs_adapt: t.epochs_adapt,
            epochs_gate: t.epochs_gate,
            lr: t.lr,
            momentum: t.momentum,
            lambda: t.lambda,
            margin: t.margin,
            sampler: SamplerConfig {
                identities: t.batch_identities,
                instances: t.batch_instances,
                seed: 0,
            },
            cluster: ClusterConfig {
                min_pts: d.min_pts,
                eps_percentile: d.eps_percentile,
            },
            logit_scale: t.logit_scale,
            head_reinit: match t.head_reinit {
                HeadReinitKey::EveryEpoch => HeadReinit::EveryEpoch,
                HeadReinitKey::OnCountChange => HeadReinit::OnCountChange,
            },
            train_head_affine: t.train_head_affine,
            seed: self.seed,
        };
        ScenarioConfig {
            backbone: BackboneConfig {
                layers: b.layers,
                dim: b.dim,
                tokens: b.tokens,
                heads: b.heads,
                input_dim: b.input_dim,
                hidden: b.hidden,
            },
            lora: LoraConfig {
                rank: l.r,
                beta: l.beta,
                dropout: l.dropout,
            },
            train,
            latent_dim: self.data.latent_dim,
            sources: self.data.sources.iter().map(|r| r.resolve(default_source_recipe())).collect(),
            target: self.data.target.resolve(default_target_recipe()),
        }
    }

    /// Structural checks that do not need any data.
    pub fn validate(&self) -> Result<ScenarioConfig, String> {
        let s = self.scenario();
        s.backbone.validate().map_err(|e| e.to_string())?;
        s.lora.validate().map_err(|e| e.to_string())?;
        s.train.validate().map_err(|e| e.to_string())?;
        if s.sources.is_empty() {
            return Err("data.sources must list at least one source domain".into());
        }
        if s.target.eval_identities == 0 {
            return Err("the target domain needs held-out identities for evaluation".into());
        }
        s.specs(self.seed).map_err(|e| e.to_string())?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }
}
