//! Model ⇄ container conversions. Every model checkpoint is
//! self-contained: it carries the backbone it runs on.

use super::{ExpertModel, MergedModel, SourceModel};
use crate::data::{fnv1a, Checkpoint};
use crate::error::{Error, Result};
use crate::gating::{GateParams, LayerGate};
use crate::lora::{ExpertAdapterSet, LoraAdapter};
use crate::model::{BackboneConfig, BackboneParams, HeadParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Source = 0,
    Expert = 1,
    Merged = 2,
}

/// Hash of the serialized bytes; equal hashes back the freeze contracts.
pub fn fingerprint(c: &Checkpoint) -> u64 {
    fnv1a(&c.encode())
}

fn fresh(c: &mut Checkpoint, name: impl Into<String>, t: &Tensor) {
    c.insert(name, t.clone()).expect("names are generated unique");
}

fn take_shaped(c: &Checkpoint, name: &str, like: &Tensor) -> Result<Tensor> {
    let t = c.require(name)?;
    if t.shape() != like.shape() {
        return Err(Error::Incompatible(format!(
            "entry {name} has shape {:?}, expected {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t.clone())
}

pub fn backbone_checkpoint(b: &BackboneParams) -> Checkpoint {
    let mut c = Checkpoint::new();
    let cfg = b.config;
    for (k, v) in [
        ("layers", cfg.layers),
        ("dim", cfg.dim),
        ("tokens", cfg.tokens),
        ("heads", cfg.heads),
        ("input_dim", cfg.input_dim),
        ("hidden", cfg.hidden),
    ] {
        c.set_meta(k, v as f64).expect("fresh container");
    }
    for (name, t) in b.named_tensors() {
        fresh(&mut c, name, t);
    }
    c
}

pub fn backbone_from(c: &Checkpoint) -> Result<BackboneParams> {
    let config = BackboneConfig {
        layers: c.meta_usize("layers")?,
        dim: c.meta_usize("dim")?,
        tokens: c.meta_usize("tokens")?,
        heads: c.meta_usize("heads")?,
        input_dim: c.meta_usize("input_dim")?,
        hidden: c.meta_usize("hidden")?,
    };
    let mut b = BackboneParams::init(config, 0)?;
    let loaded = b
        .named_tensors()
        .into_iter()
        .map(|(name, like)| take_shaped(c, &name, like))
        .collect::<Result<Vec<_>>>()?;
    for (slot, t) in b.tensors_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(b)
}

pub fn head_checkpoint(h: &HeadParams) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (name, t) in h.named_tensors() {
        fresh(&mut c, name, t);
    }
    c
}

pub fn head_from(c: &Checkpoint) -> Result<HeadParams> {
    let classifier = c.require("classifier")?;
    if classifier.rank() != 2 {
        return Err(Error::Incompatible("classifier must be a matrix".into()));
    }
    let mut h = HeadParams::new(classifier.rows(), classifier.cols())?;
    h.bn_scale = take_shaped(c, "bn_scale", &h.bn_scale)?;
    h.bn_offset = take_shaped(c, "bn_offset", &h.bn_offset)?;
    h.running_mean = take_shaped(c, "running_mean", &h.running_mean)?;
    h.running_var = take_shaped(c, "running_var", &h.running_var)?;
    h.classifier = classifier.clone();
    Ok(h)
}

pub fn adapters_checkpoint(set: &ExpertAdapterSet) -> Checkpoint {
    let mut c = Checkpoint::new();
    let first = &set.adapters[0];
    c.set_meta("source_id", set.source_id as f64).expect("fresh container");
    c.set_meta("rank", first.rank as f64).expect("fresh container");
    c.set_meta("beta", first.beta).expect("fresh container");
    c.set_meta("dropout", first.dropout).expect("fresh container");
    for a in &set.adapters {
        fresh(&mut c, format!("{}/a", a.key.name()), &a.a);
        fresh(&mut c, format!("{}/b", a.key.name()), &a.b);
    }
    c
}

pub fn adapters_from(c: &Checkpoint, config: &BackboneConfig) -> Result<ExpertAdapterSet> {
    let rank = c.meta_usize("rank")?;
    let beta = c.meta("beta")?;
    let dropout = c.meta("dropout")?;
    let adapters = config
        .layer_keys()
        .into_iter()
        .map(|key| {
            let (n, m) = config.slot_dims(key.slot);
            let a = take_shaped(c, &format!("{}/a", key.name()), &Tensor::zeros(&[n, rank]))?;
            let b = take_shaped(c, &format!("{}/b", key.name()), &Tensor::zeros(&[rank, m]))?;
            LoraAdapter::from_factors(key, a, b, beta, dropout)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertAdapterSet {
        source_id: c.meta_usize("source_id")?,
        adapters,
    })
}

pub fn gates_checkpoint(g: &GateParams, config: &BackboneConfig) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (key, gate) in config.layer_keys().into_iter().zip(&g.layers) {
        fresh(&mut c, format!("{}/projection", key.name()), &gate.projection);
        fresh(&mut c, format!("{}/theta", key.name()), &Tensor::scalar(gate.theta));
    }
    c
}

pub fn gates_from(c: &Checkpoint, config: &BackboneConfig) -> Result<GateParams> {
    let layers = config
        .layer_keys()
        .into_iter()
        .map(|key| {
            let like = Tensor::zeros(&[config.tokens, config.slot_dims(key.slot).1]);
            let projection = take_shaped(c, &format!("{}/projection", key.name()), &like)?;
            let theta = take_shaped(c, &format!("{}/theta", key.name()), &Tensor::scalar(0.0))?;
            Ok(LayerGate {
                projection,
                theta: theta.data()[0],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GateParams { layers })
}

fn with_kind(kind: ModelKind) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.set_meta("kind", kind as u8 as f64).expect("fresh container");
    c
}

pub fn source_checkpoint(m: &SourceModel) -> Checkpoint {
    let mut c = with_kind(ModelKind::Source);
    c.set_meta("source_id", m.source_id as f64).expect("fresh container");
    c.extend_prefixed("backbone/", backbone_checkpoint(&m.backbone)).expect("disjoint prefixes");
    c.extend_prefixed("head/", head_checkpoint(&m.head)).expect("disjoint prefixes");
    c
}

pub fn expert_checkpoint(m: &ExpertModel) -> Checkpoint {
    let mut c = with_kind(ModelKind::Expert);
    c.extend_prefixed("backbone/", backbone_checkpoint(&m.backbone)).expect("disjoint prefixes");
    c.extend_prefixed("adapters/", adapters_checkpoint(&m.adapters)).expect("disjoint prefixes");
    c.extend_prefixed("head/", head_checkpoint(&m.head)).expect("disjoint prefixes");
    c
}

pub fn merged_checkpoint(m: &MergedModel) -> Checkpoint {
    let mut c = with_kind(ModelKind::Merged);
    c.set_meta("experts", m.experts.len() as f64).expect("fresh container");
    c.extend_prefixed("backbone/", backbone_checkpoint(&m.backbone)).expect("disjoint prefixes");
    for (i, e) in m.experts.iter().enumerate() {
        c.extend_prefixed(&format!("expert{i}/"), adapters_checkpoint(e)).expect("disjoint prefixes");
    }
    c.extend_prefixed("gates/", gates_checkpoint(&m.gates, &m.backbone.config)).expect("disjoint prefixes");
    c.extend_prefixed("head/", head_checkpoint(&m.head)).expect("disjoint prefixes");
    c
}

/// Bytes that stage 2 must leave untouched: averaged backbone and experts.
pub fn merged_frozen_checkpoint(m: &MergedModel) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.extend_prefixed("backbone/", backbone_checkpoint(&m.backbone)).expect("disjoint prefixes");
    for (i, e) in m.experts.iter().enumerate() {
        c.extend_prefixed(&format!("expert{i}/"), adapters_checkpoint(e)).expect("disjoint prefixes");
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Source(SourceModel),
    Expert(ExpertModel),
    Merged(MergedModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Source(_) => ModelKind::Source,
            AnyModel::Expert(_) => ModelKind::Expert,
            AnyModel::Merged(_) => ModelKind::Merged,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            AnyModel::Source(m) => source_checkpoint(m),
            AnyModel::Expert(m) => expert_checkpoint(m),
            AnyModel::Merged(m) => merged_checkpoint(m),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let backbone = backbone_from(&c.sub("backbone/"))?;
        let head = head_from(&c.sub("head/"))?;
        let config = backbone.config;
        match c.meta_usize("kind")? {
            0 => Ok(AnyModel::Source(SourceModel {
                source_id: c.meta_usize("source_id")?,
                backbone,
                head,
            })),
            1 => Ok(AnyModel::Expert(ExpertModel {
                adapters: adapters_from(&c.sub("adapters/"), &config)?,
                backbone,
                head,
            })),
            2 => {
                let experts = (0..c.meta_usize("experts")?)
                    .map(|i| adapters_from(&c.sub(&format!("expert{i}/")), &config))
                    .collect::<Result<Vec<_>>>()?;
                Ok(AnyModel::Merged(MergedModel {
                    gates: gates_from(&c.sub("gates/"), &config)?,
                    backbone,
                    experts,
                    head,
                }))
            }
            k => Err(Error::Incompatible(format!("unknown model kind {k}"))),
        }
    }
}
