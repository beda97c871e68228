//! The three training loops.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::artifacts::{backbone_checkpoint, fingerprint, merged_frozen_checkpoint};
use super::encode::{normalized_features, Encoder};
use super::{seed_tag, EpochStats, ExpertModel, MergedModel, Sgd, SourceModel, TrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::gating::{deltas_by_layer, GateParams, GatedHook};
use crate::lora::{average_backbones, average_head_norms, ExpertAdapterSet, LoraConfig, LoraHook};
use crate::losses::{combined_loss_on_tape, pk_sample, LossParts, SamplerConfig};
use crate::model::{
    forward_backbone, head_forward, BackboneConfig, BackboneParams, BoundBackbone, BoundHead, HeadParams,
    LinearHook, Mode, Plain,
};
use crate::pseudo::{cluster_features, PseudoLabelSet};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{l2_normalize, Tensor, NORM_EPS};

/// Classifier init range for supervised pretraining.

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub model: SourceModel,
    pub history: Vec<EpochStats>,
    /// Mean per-sample cross-entropy of each epoch.
    pub cross_entropy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptReport {
    pub model: ExpertModel,
    pub history: Vec<EpochStats>,
    /// Backbone fingerprint before and after adaptation.
    pub backbone_fingerprint: (u64, u64),
    pub trainable_params: usize,
}

#[derive(Debug, Clone)]
pub struct GateReport {
    pub model: MergedModel,
    pub history: Vec<EpochStats>,
    /// Fingerprint of backbone plus adapters before and after.
    pub frozen_fingerprint: (u64, u64),
    /// Largest `|Σα − 1|` seen over every sample and layer.
    pub max_alpha_sum_error: f64,
    /// Number of `(sample, layer)` coefficient vectors checked.
    pub alpha_checks: usize,
    pub trainable_params: usize,
}

/// Contiguous class ids ordered by identity.
fn label_map(samples: &[Sample]) -> (Vec<usize>, usize) {
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        ids.insert(s.identity, 0);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    let labels = samples.iter().map(|s| ids[&s.identity]).collect();
    (labels, ids.len())
}

/// Runs the encoder on `indices` and stacks the features into `B × d`.
fn forward_batch<H: LinearHook>(
    tape: &mut Tape,
    bb: &BoundBackbone,
    hook: &mut H,
    samples: &[Sample],
    indices: &[usize],
    mut after_sample: impl FnMut(&H),
) -> Result<Var> {
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        rows.push(forward_backbone(tape, bb, hook, &samples[i].tokens)?);
        after_sample(hook);
    }
    tape.concat_rows(&rows)
}

fn head_loss(
    tape: &mut Tape,
    head: &HeadParams,
    bound: &BoundHead,
    z: Var,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let out = head_forward(tape, head, bound, z, Mode::Train)?;
    combined_loss_on_tape(tape, out.logits, labels, z, cfg.margin, cfg.lambda)
}

fn grads_of(grads: &Gradients, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v).shape()))
        .collect()
}

fn head_vars(bound: &BoundHead, affine: bool) -> Vec<Var> {
    if affine {
        vec![bound.bn_scale, bound.bn_offset, bound.classifier]
    } else {
        vec![bound.classifier]
    }
}

fn head_params_mut(head: &mut HeadParams, affine: bool) -> Vec<&mut Tensor> {
    if affine {
        vec![&mut head.bn_scale, &mut head.bn_offset, &mut head.classifier]
    } else {
        vec![&mut head.classifier]
    }
}

fn head_trainable(head: &HeadParams, affine: bool) -> usize {
    head.classifier.numel() + if affine { 2 * head.dim() } else { 0 }
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            step,
            msg: format!("loss became {loss}"),
        })
    }
}

/// Head whose classifier columns are the scaled unit centroids of each
/// cluster's eval-mode head features. Batch-norm state is kept from `base`.
fn centroid_head(base: &HeadParams, raw: &Tensor, pseudo: &PseudoLabelSet, scale: f64) -> Result<HeadParams> {
    let d = base.dim();
    let mut sums = vec![vec![0.0; d]; pseudo.n_clusters];
    for (i, &l) in pseudo.labels.iter().enumerate() {
        if l >= 0 {
            let (z_norm, _) = base.forward_eval(raw.row(i))?;
            for (s, v) in sums[l as usize].iter_mut().zip(z_norm) {
                *s += v;
            }
        }
    }
    let mut head = HeadParams::new(d, pseudo.n_clusters)?;
    head.bn_scale = base.bn_scale.clone();
    head.bn_offset = base.bn_offset.clone();
    head.running_mean = base.running_mean.clone();
    head.running_var = base.running_var.clone();
    for (c, sum) in sums.iter().enumerate() {
        for (j, v) in l2_normalize(sum, NORM_EPS).into_iter().enumerate() {
            head.classifier.set(j, c, scale * v);
        }
    }
    Ok(head)
}

fn cluster_epoch(
    encoder: &Encoder<'_>,
    target: &[Sample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Tensor, PseudoLabelSet)> {
    let raw = encoder.embed_all(target)?;
    let pseudo = cluster_features(
        &normalized_features(&raw),
        cfg.cluster.eps_percentile,
        cfg.cluster.min_pts,
        epoch,
    )?;
    Ok((raw, pseudo))
}

/// Supervised pretraining on one labeled domain. Every source starts from
/// the same initialization, derived from the config seed.
pub fn pretrain_source(
    samples: &[Sample],
    source_id: usize,
    config: BackboneConfig,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<PretrainReport> {
    cfg.validate()?;
    config.validate()?;
    let (labels, classes) = label_map(samples);
    if classes < cfg.sampler.identities {
        return Err(Error::Sampling(format!(
            "{classes} identities in source {source_id}, batches need {}",
            cfg.sampler.identities
        )));
    }
    let mut backbone = BackboneParams::init(config, cfg.derive_seed(seed_tag::BACKBONE_INIT, 0))?;
    let mut head = HeadParams::random(
        config.dim,
        classes,
        cfg.logit_scale,
        cfg.derive_seed(seed_tag::HEAD_INIT, source_id as u64),
    )?;
    let sampler = SamplerConfig {
        seed: cfg.derive_seed(seed_tag::SAMPLER, source_id as u64),
        ..cfg.sampler
    };
    let affine = cfg.train_head_affine;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs_source);
    let mut cross_entropy = Vec::with_capacity(cfg.epochs_source);
    let mut step = 0;
    for epoch in 0..cfg.epochs_source {
        let batches = pk_sample(&labels, &sampler, epoch as u64)?;
        let (mut total, mut ce, mut seen) = (0.0, 0.0, 0usize);
        for batch in &batches {
            let mut tape = Tape::new();
            let bb = backbone.bind(&mut tape, true);
            let bh = head.bind(&mut tape, true, affine);
            let z = forward_batch(&mut tape, &bb, &mut Plain, samples, batch, |_| ())?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let parts = head_loss(&mut tape, &head, &bh, z, &batch_labels, cfg)?;
            let loss = tape.scalar(parts.total);
            check_loss(loss, step)?;
            let grads = tape.backward(parts.total)?;
            let mut g = grads_of(&grads, &tape, &bb.vars());
            g.extend(grads_of(&grads, &tape, &head_vars(&bh, affine)));
            let mut params = backbone.tensors_mut();
            params.extend(head_params_mut(&mut head, affine));
            opt.step(params, &g)?;
            head.update_running_stats(tape.value(z));
            total += loss;
            ce += tape.scalar(parts.cross_entropy);
            seen += batch.len();
            step += 1;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: (seen > 0).then(|| total / seen as f64),
            clusters: classes,
            noise: 0,
        };
        progress(&stats);
        history.push(stats);
        cross_entropy.push(if seen > 0 { ce / seen as f64 } else { f64::NAN });
    }
    Ok(PretrainReport {
        model: SourceModel {
            source_id,
            backbone,
            head,
        },
        history,
        cross_entropy,
    })
}

/// Stage 1: trains low-rank adapters and a target head on pseudo-labels
/// while the source backbone stays frozen.
pub fn adapt_expert(
    source: &SourceModel,
    target: &[Sample],
    lora: &LoraConfig,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<AdaptReport> {
    cfg.validate()?;
    lora.validate()?;
    let sid = source.source_id as u64;
    let config = source.backbone.config;
    let before = fingerprint(&backbone_checkpoint(&source.backbone));
    let mut adapters = ExpertAdapterSet::init(
        &config,
        lora,
        source.source_id,
        cfg.derive_seed(seed_tag::ADAPTER_INIT, sid),
    )?;
    let mut head = source.head.clone();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed(seed_tag::DROPOUT, sid));
    let sampler = SamplerConfig {
        seed: cfg.derive_seed(seed_tag::SAMPLER, 1000 + sid),
        ..cfg.sampler
    };
    let affine = cfg.train_head_affine;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut current_clusters = None;
    let mut history = Vec::with_capacity(cfg.epochs_adapt);
    let mut step = 0;
    for epoch in 0..cfg.epochs_adapt {
        let (raw, pseudo) = cluster_epoch(&Encoder::Adapted(&source.backbone, &adapters), target, cfg, epoch)?;
        let mut stats = EpochStats {
            epoch: epoch + 1,
            loss: None,
            clusters: pseudo.n_clusters,
            noise: pseudo.noise_count(),
        };
        if pseudo.n_clusters < cfg.sampler.identities {
            warn!(
                "expert {sid} epoch {}: {} clusters, need {}; skipping",
                epoch + 1,
                pseudo.n_clusters,
                cfg.sampler.identities
            );
            progress(&stats);
            history.push(stats);
            continue;
        }
        if cfg.head_reinit.due(current_clusters, pseudo.n_clusters) {
            head = centroid_head(&head, &raw, &pseudo, cfg.logit_scale)?;
            opt = Sgd::new(cfg.lr, cfg.momentum);
            current_clusters = Some(pseudo.n_clusters);
        }
        let (members, labels) = pseudo.clustered();
        let batches = pk_sample(&labels, &sampler, epoch as u64)?;
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in &batches {
            let indices: Vec<usize> = batch.iter().map(|&b| members[b]).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&b| labels[b]).collect();
            let mut tape = Tape::new();
            let bb = source.backbone.bind(&mut tape, false);
            let bh = head.bind(&mut tape, true, affine);
            let mut hook = LoraHook::new(&mut tape, &adapters, true, Some(&mut dropout_rng));
            let z = forward_batch(&mut tape, &bb, &mut hook, target, &indices, |_| ())?;
            let adapter_vars: Vec<Var> = hook.vars.iter().flat_map(|&(a, b)| [a, b]).collect();
            drop(hook);
            let parts = head_loss(&mut tape, &head, &bh, z, &batch_labels, cfg)?;
            let loss = tape.scalar(parts.total);
            check_loss(loss, step)?;
            let grads = tape.backward(parts.total)?;
            let mut g = grads_of(&grads, &tape, &adapter_vars);
            g.extend(grads_of(&grads, &tape, &head_vars(&bh, affine)));
            let mut params = adapters.factors_mut();
            params.extend(head_params_mut(&mut head, affine));
            opt.step(params, &g)?;
            head.update_running_stats(tape.value(z));
            total += loss;
            seen += batch.len();
            step += 1;
        }
        stats.loss = (seen > 0).then(|| total / seen as f64);
        info!("expert {sid} {stats}");
        progress(&stats);
        history.push(stats);
    }
    let after = fingerprint(&backbone_checkpoint(&source.backbone));
    let trainable_params = adapters.param_count() + head_trainable(&head, affine);
    Ok(AdaptReport {
        model: ExpertModel {
            backbone: source.backbone.clone(),
            adapters,
            head,
        },
        history,
        backbone_fingerprint: (before, after),
        trainable_params,
    })
}

/// Averages the source backbones and attaches the frozen experts with
/// zero-initialized gates (uniform mixing).
pub fn build_merged_model(sources: &[SourceModel], experts: &[ExpertModel]) -> Result<MergedModel> {
    if sources.is_empty() || sources.len() != experts.len() {
        return Err(Error::Incompatible(format!(
            "{} sources for {} experts",
            sources.len(),
            experts.len()
        )));
    }
    let backbones: Vec<BackboneParams> = sources.iter().map(|s| s.backbone.clone()).collect();
    let backbone = average_backbones(&backbones)?;
    let config = backbone.config;
    let adapters: Vec<ExpertAdapterSet> = experts.iter().map(|e| e.adapters.clone()).collect();
    for (e, s) in experts.iter().zip(sources) {
        if e.backbone.config != config {
            return Err(Error::Incompatible("expert backbone config differs".into()));
        }
        if e.adapters.source_id != s.source_id {
            return Err(Error::Incompatible(format!(
                "expert for source {} paired with source {}",
                e.adapters.source_id, s.source_id
            )));
        }
        e.adapters.validate(&config)?;
    }
    let heads: Vec<HeadParams> = experts.iter().map(|e| e.head.clone()).collect();
    Ok(MergedModel {
        gates: GateParams::new(&config),
        head: average_head_norms(&heads)?,
        backbone,
        experts: adapters,
    })
}

/// Stage 2: trains only the gates and the target head.
pub fn train_gate(
    mut model: MergedModel,
    target: &[Sample],
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<GateReport> {
    cfg.validate()?;
    let config = model.backbone.config;
    model.gates.validate(&config)?;
    let before = fingerprint(&merged_frozen_checkpoint(&model));
    let deltas = deltas_by_layer(&model.experts, &config)?;
    let sampler = SamplerConfig {
        seed: cfg.derive_seed(seed_tag::SAMPLER, 2000),
        ..cfg.sampler
    };
    let affine = cfg.train_head_affine;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut current_clusters = None;
    let mut history = Vec::with_capacity(cfg.epochs_gate);
    let mut max_err = 0.0f64;
    let mut checks = 0usize;
    let mut step = 0;
    for epoch in 0..cfg.epochs_gate {
        let (raw, pseudo) = cluster_epoch(&Encoder::gated(&model, &deltas), target, cfg, epoch)?;
        if pseudo.n_clusters < cfg.sampler.identities {
            return Err(Error::NoClusters(format!(
                "gate epoch {}: {} clusters ({} noise), need {}",
                epoch + 1,
                pseudo.n_clusters,
                pseudo.noise_count(),
                cfg.sampler.identities
            )));
        }
        if cfg.head_reinit.due(current_clusters, pseudo.n_clusters) {
            model.head = centroid_head(&model.head, &raw, &pseudo, cfg.logit_scale)?;
            opt = Sgd::new(cfg.lr, cfg.momentum);
            current_clusters = Some(pseudo.n_clusters);
        }
        let (members, labels) = pseudo.clustered();
        let batches = pk_sample(&labels, &sampler, epoch as u64)?;
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in &batches {
            let indices: Vec<usize> = batch.iter().map(|&b| members[b]).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&b| labels[b]).collect();
            let mut tape = Tape::new();
            let bb = model.backbone.bind(&mut tape, false);
            let bh = model.head.bind(&mut tape, true, affine);
            let gate_vars = model.gates.bind(&mut tape, true);
            let mut hook = GatedHook::new(&mut tape, &deltas, gate_vars.clone())?;
            let z = forward_batch(&mut tape, &bb, &mut hook, target, &indices, |h| {
                for alpha in &h.last_alpha {
                    max_err = max_err.max((alpha.iter().sum::<f64>() - 1.0).abs());
                    checks += 1;
                }
            })?;
            let parts = head_loss(&mut tape, &model.head, &bh, z, &batch_labels, cfg)?;
            let loss = tape.scalar(parts.total);
            check_loss(loss, step)?;
            let grads = tape.backward(parts.total)?;
            let gate_flat: Vec<Var> = gate_vars.iter().flat_map(|&(p, t)| [p, t]).collect();
            let mut g = grads_of(&grads, &tape, &gate_flat);
            g.extend(grads_of(&grads, &tape, &head_vars(&bh, affine)));
            let mut thetas: Vec<Tensor> = model
                .gates
                .layers
                .iter()
                .map(|l| Tensor::scalar(l.theta).as_matrix())
                .collect();
            {
                let mut params: Vec<&mut Tensor> = Vec::with_capacity(g.len());
                for (layer, theta) in model.gates.layers.iter_mut().zip(thetas.iter_mut()) {
                    params.push(&mut layer.projection);
                    params.push(theta);
                }
                params.extend(head_params_mut(&mut model.head, affine));
                opt.step(params, &g)?;
            }
            for (layer, theta) in model.gates.layers.iter_mut().zip(&thetas) {
                layer.theta = theta.data()[0];
            }
            model.head.update_running_stats(tape.value(z));
            total += loss;
            seen += batch.len();
            step += 1;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: (seen > 0).then(|| total / seen as f64),
            clusters: pseudo.n_clusters,
            noise: pseudo.noise_count(),
        };
        info!("gate {stats}");
        progress(&stats);
        history.push(stats);
    }
    let after = fingerprint(&merged_frozen_checkpoint(&model));
    let trainable_params = model.gates.param_count() + head_trainable(&model.head, affine);
    Ok(GateReport {
        model,
        history,
        frozen_fingerprint: (before, after),
        max_alpha_sum_error: max_err,
        alpha_checks: checks,
        trainable_params,
    })
}
