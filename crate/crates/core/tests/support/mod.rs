//! Shared test fixtures: finite-difference gradient checking, brute-force
//! clustering and retrieval oracles, and random instance generators.
//!
//! The oracles deliberately avoid the algorithms they check: clustering uses
//! a boolean transitive closure instead of region growing, retrieval counts
//! predecessors instead of sorting.

#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sage_core::data::{DomainRecipe, SyntheticDataset};
use sage_core::gating::{deltas_by_layer, GateParams, GatedHook};
use sage_core::lora::{ExpertAdapterSet, LoraConfig, LoraHook};
use sage_core::losses::combined_loss_on_tape;
use sage_core::model::{forward_backbone, head_forward, BackboneConfig, BackboneParams, HeadParams, Mode, Plain};
use sage_core::pipeline::scenario::ScenarioConfig;
use sage_core::pipeline::{adapt_expert, pretrain_source, ExpertModel, SourceModel, TrainConfig};
use sage_core::{Result, Tape, Tensor, Var};

pub const MARGIN: f64 = 0.3;
pub const LAMBDA: f64 = 1.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| sigma * normal(rng))
}

/// A scalar loss over a set of trainable tensors.
pub trait Objective {
    /// Builds the loss; returned leaves follow the order of `params_mut`.
    fn build(&self, tape: &mut Tape) -> Result<(Var, Vec<Var>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

fn loss_of<O: Objective>(obj: &O) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = obj.build(&mut tape).expect("objective builds");
    tape.scalar(loss)
}

/// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` over `probes` random
/// coordinates, central differences.
pub fn relative_gradient_error<O: Objective>(obj: &mut O, probes: usize, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let (loss, leaves) = obj.build(&mut tape).expect("objective builds");
    let grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v).shape()))
        .collect();
    let sizes: Vec<usize> = obj.params_mut().iter().map(|t| t.numel()).collect();
    assert_eq!(sizes.len(), analytic.len(), "one gradient per parameter");
    let total: usize = sizes.iter().sum();
    let mut r = rng(seed);
    let picks: Vec<usize> = if total <= probes {
        (0..total).collect()
    } else {
        (0..probes).map(|_| r.random_range(0..total)).collect()
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for flat in picks {
        let (mut t, mut i) = (0, flat);
        while i >= sizes[t] {
            i -= sizes[t];
            t += 1;
        }
        let orig = obj.params_mut()[t].data()[i];
        let h = 1e-5 * orig.abs().max(1.0);
        obj.params_mut()[t].data_mut()[i] = orig + h;
        let up = loss_of(obj);
        obj.params_mut()[t].data_mut()[i] = orig - h;
        let down = loss_of(obj);
        obj.params_mut()[t].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[t].data()[i];
        diff += (a - numeric).powi(2);
        na += a * a;
        nn += numeric * numeric;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

pub fn tiny_config(layers: usize) -> BackboneConfig {
    BackboneConfig {
        layers,
        dim: 8,
        tokens: 3,
        heads: 2,
        input_dim: 4,
        hidden: 12,
    }
}

fn random_backbone(config: BackboneConfig, r: &mut ChaCha8Rng) -> BackboneParams {
    let mut bb = BackboneParams::init(config, r.random()).expect("valid config");
    for t in bb.tensors_mut() {
        // Norm scales stay near one, everything else gets jitter.
        for v in t.data_mut() {
            *v += 0.1 * normal(r);
        }
    }
    bb
}

fn random_head(dim: usize, classes: usize, r: &mut ChaCha8Rng) -> HeadParams {
    let mut head = HeadParams::random(dim, classes, 3.0, r.random()).expect("valid head");
    for v in head.bn_scale.data_mut() {
        *v = 1.0 + 0.2 * normal(r);
    }
    for v in head.bn_offset.data_mut() {
        *v = 0.2 * normal(r);
    }
    head
}

/// Two identities, two samples each.
fn random_batch(config: &BackboneConfig, r: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>) {
    let samples = (0..4)
        .map(|_| random_tensor(r, config.content_tokens(), config.input_dim, 1.0))
        .collect();
    (samples, vec![0, 0, 1, 1])
}

fn randomize_adapters(set: &mut ExpertAdapterSet, r: &mut ChaCha8Rng) {
    for t in set.factors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * normal(r);
        }
    }
}

fn head_leaves(tape: &mut Tape, head: &HeadParams) -> (sage_core::model::BoundHead, Vec<Var>) {
    let bh = head.bind(tape, true, true);
    (bh, vec![bh.bn_scale, bh.bn_offset, bh.classifier])
}

fn head_tensors(head: &mut HeadParams) -> [&mut Tensor; 3] {
    [&mut head.bn_scale, &mut head.bn_offset, &mut head.classifier]
}

fn finish(tape: &mut Tape, head: &HeadParams, bh: &sage_core::model::BoundHead, rows: Vec<Var>, labels: &[usize]) -> Result<Var> {
    let z = tape.concat_rows(&rows)?;
    let out = head_forward(tape, head, bh, z, Mode::Train)?;
    Ok(combined_loss_on_tape(tape, out.logits, labels, z, MARGIN, LAMBDA)?.total)
}

/// Supervised source loss over the full backbone and head.
pub struct SourceObjective {
    pub backbone: BackboneParams,
    pub head: HeadParams,
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl SourceObjective {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let config = tiny_config(1 + (seed % 2) as usize);
        let backbone = random_backbone(config, &mut r);
        let head = random_head(config.dim, 2, &mut r);
        let (samples, labels) = random_batch(&config, &mut r);
        Self {
            backbone,
            head,
            samples,
            labels,
        }
    }
}

impl Objective for SourceObjective {
    fn build(&self, tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
        let bb = self.backbone.bind(tape, true);
        let (bh, head_vars) = head_leaves(tape, &self.head);
        let rows = self
            .samples
            .iter()
            .map(|s| forward_backbone(tape, &bb, &mut Plain, s))
            .collect::<Result<Vec<_>>>()?;
        let loss = finish(tape, &self.head, &bh, rows, &self.labels)?;
        let mut leaves = bb.vars();
        leaves.extend(head_vars);
        Ok((loss, leaves))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.tensors_mut();
        out.extend(head_tensors(&mut self.head));
        out
    }
}

/// Pseudo-label loss over adapters and head; backbone frozen, dropout mask
/// fixed by seed so the loss is a deterministic function.
pub struct AdaptationObjective {
    pub backbone: BackboneParams,
    pub adapters: ExpertAdapterSet,
    pub head: HeadParams,
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub dropout_seed: u64,
}

impl AdaptationObjective {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let config = tiny_config(1 + (seed % 2) as usize);
        let backbone = random_backbone(config, &mut r);
        let mut adapters = ExpertAdapterSet::init(&config, &LoraConfig::default(), 0, r.random()).expect("adapters");
        randomize_adapters(&mut adapters, &mut r);
        let head = random_head(config.dim, 2, &mut r);
        let (samples, labels) = random_batch(&config, &mut r);
        Self {
            backbone,
            adapters,
            head,
            samples,
            labels,
            dropout_seed: r.random(),
        }
    }
}

impl Objective for AdaptationObjective {
    fn build(&self, tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
        let bb = self.backbone.bind(tape, false);
        let (bh, head_vars) = head_leaves(tape, &self.head);
        let mut dropout = rng(self.dropout_seed);
        let mut hook = LoraHook::new(tape, &self.adapters, true, Some(&mut dropout));
        let rows = self
            .samples
            .iter()
            .map(|s| forward_backbone(tape, &bb, &mut hook, s))
            .collect::<Result<Vec<_>>>()?;
        let mut leaves: Vec<Var> = hook.vars.iter().flat_map(|&(a, b)| [a, b]).collect();
        drop(hook);
        let loss = finish(tape, &self.head, &bh, rows, &self.labels)?;
        leaves.extend(head_vars);
        Ok((loss, leaves))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.adapters.factors_mut();
        out.extend(head_tensors(&mut self.head));
        out
    }
}

/// Gate loss over projections, temperatures and head; backbone and experts
/// frozen.
pub struct GateObjective {
    pub backbone: BackboneParams,
    pub deltas: Vec<Vec<Tensor>>,
    pub gates: GateParams,
    /// Temperature parameters as 1×1 tensors so they can be perturbed.
    pub thetas: Vec<Tensor>,
    pub head: HeadParams,
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl GateObjective {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let config = tiny_config(1 + (seed % 2) as usize);
        let backbone = random_backbone(config, &mut r);
        let experts: Vec<ExpertAdapterSet> = (0..2 + (seed % 2) as usize)
            .map(|i| {
                let mut set = ExpertAdapterSet::init(&config, &LoraConfig::default(), i, r.random()).expect("adapters");
                randomize_adapters(&mut set, &mut r);
                set
            })
            .collect();
        let deltas = deltas_by_layer(&experts, &config).expect("deltas");
        let mut gates = GateParams::new(&config);
        for layer in &mut gates.layers {
            for v in layer.projection.data_mut() {
                *v = 0.5 * normal(&mut r);
            }
            layer.theta += 0.3 * normal(&mut r);
        }
        let thetas = gates.layers.iter().map(|l| Tensor::scalar(l.theta).as_matrix()).collect();
        let head = random_head(config.dim, 2, &mut r);
        let (samples, labels) = random_batch(&config, &mut r);
        Self {
            backbone,
            deltas,
            gates,
            thetas,
            head,
            samples,
            labels,
        }
    }
}

impl Objective for GateObjective {
    fn build(&self, tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
        let mut gates = self.gates.clone();
        for (layer, theta) in gates.layers.iter_mut().zip(&self.thetas) {
            layer.theta = theta.data()[0];
        }
        let bb = self.backbone.bind(tape, false);
        let (bh, head_vars) = head_leaves(tape, &self.head);
        let gate_vars = gates.bind(tape, true);
        let mut hook = GatedHook::new(tape, &self.deltas, gate_vars.clone())?;
        let rows = self
            .samples
            .iter()
            .map(|s| forward_backbone(tape, &bb, &mut hook, s))
            .collect::<Result<Vec<_>>>()?;
        let loss = finish(tape, &self.head, &bh, rows, &self.labels)?;
        let mut leaves: Vec<Var> = gate_vars.iter().flat_map(|&(p, t)| [p, t]).collect();
        leaves.extend(head_vars);
        Ok((loss, leaves))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (layer, theta) in self.gates.layers.iter_mut().zip(self.thetas.iter_mut()) {
            out.push(&mut layer.projection);
            out.push(theta);
        }
        out.extend(head_tensors(&mut self.head));
        out
    }
}

/// Brute-force DBSCAN: core flags from neighbor counts, clusters from the
/// transitive closure of the core adjacency matrix, border points to the
/// lowest-numbered adjacent cluster, then canonical relabeling.
pub fn dbscan_oracle(dist: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = dist.len();
    let near = |i: usize, j: usize| dist[i][j] <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = core[i] && core[j] && (i == j || near(i, j));
        }
    }
    // Warshall closure.
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    // Component id of a core point: its smallest reachable core index,
    // ranked among all such representatives.
    let rep: Vec<Option<usize>> = (0..n)
        .map(|i| core[i].then(|| (0..n).find(|&j| reach[i][j]).expect("reaches itself")))
        .collect();
    let mut reps: Vec<usize> = rep.iter().flatten().copied().collect();
    reps.sort_unstable();
    reps.dedup();
    let id_of = |r: usize| reps.iter().position(|&x| x == r).expect("known representative") as i64;
    let raw: Vec<i64> = (0..n)
        .map(|i| match rep[i] {
            Some(r) => id_of(r),
            None => (0..n)
                .filter(|&j| core[j] && near(i, j))
                .map(|j| id_of(rep[j].expect("core")))
                .min()
                .unwrap_or(-1),
        })
        .collect();
    canonical(&raw)
}

/// Relabels clusters in order of their smallest member index.
pub fn canonical(labels: &[i64]) -> Vec<i64> {
    let mut order: Vec<i64> = Vec::new();
    for &l in labels {
        if l >= 0 && !order.contains(&l) {
            order.push(l);
        }
    }
    labels
        .iter()
        .map(|&l| if l < 0 { -1 } else { order.iter().position(|&x| x == l).unwrap() as i64 })
        .collect()
}

/// Euclidean distances between blob-structured random points, as nested rows.
pub fn random_distance_instance(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let dim = r.random_range(2..=4);
    let blobs = r.random_range(1..=5);
    let centers: Vec<Vec<f64>> = (0..blobs).map(|_| (0..dim).map(|_| 4.0 * normal(r)).collect()).collect();
    let spread = r.random_range(0.2..1.5);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let c = &centers[r.random_range(0..blobs)];
            c.iter().map(|v| v + spread * normal(r)).collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::stack_rows(rows).expect("square matrix")
}

/// Per-query retrieval by predecessor counting. Returns `(mAP, cmc at
/// each requested rank, evaluated, skipped)`.
pub fn retrieval_oracle(
    dist: &[Vec<f64>],
    q_ids: &[usize],
    g_ids: &[usize],
    q_cams: &[usize],
    g_cams: &[usize],
    ranks: &[usize],
) -> (f64, Vec<f64>, usize, usize) {
    let (mut ap_sum, mut hits, mut evaluated, mut skipped) = (0.0, vec![0usize; ranks.len()], 0, 0);
    for (q, row) in dist.iter().enumerate() {
        let valid: Vec<usize> = (0..g_ids.len())
            .filter(|&j| !(g_ids[j] == q_ids[q] && g_cams[j] == q_cams[q]))
            .collect();
        let positives: Vec<usize> = valid.iter().copied().filter(|&j| g_ids[j] == q_ids[q]).collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        let position = |j: usize| {
            valid
                .iter()
                .filter(|&&k| row[k] < row[j] || (row[k] == row[j] && k < j))
                .count()
        };
        let pos_ranks: Vec<usize> = positives.iter().map(|&j| position(j)).collect();
        let ap: f64 = pos_ranks
            .iter()
            .map(|&p| {
                let better = pos_ranks.iter().filter(|&&o| o <= p).count();
                better as f64 / (p + 1) as f64
            })
            .sum::<f64>()
            / positives.len() as f64;
        ap_sum += ap;
        let first = *pos_ranks.iter().min().unwrap();
        for (h, &r) in hits.iter_mut().zip(ranks) {
            if first < r {
                *h += 1;
            }
        }
    }
    if evaluated == 0 {
        return (0.0, vec![0.0; ranks.len()], 0, skipped);
    }
    let cmc = hits.iter().map(|&h| h as f64 / evaluated as f64).collect();
    (ap_sum / evaluated as f64, cmc, evaluated, skipped)
}

/// Random retrieval instance with quantized distances so ties occur.
pub struct RetrievalInstance {
    pub dist: Vec<Vec<f64>>,
    pub q_ids: Vec<usize>,
    pub g_ids: Vec<usize>,
    pub q_cams: Vec<usize>,
    pub g_cams: Vec<usize>,
}

impl RetrievalInstance {
    pub fn random(r: &mut ChaCha8Rng) -> Self {
        let (q, g) = (r.random_range(1..=32), r.random_range(1..=32));
        let ids = r.random_range(1..=6);
        let cams = r.random_range(1..=3);
        let levels = r.random_range(3..=20) as f64;
        Self {
            dist: (0..q)
                .map(|_| (0..g).map(|_| (r.random::<f64>() * levels).floor() / levels).collect())
                .collect(),
            q_ids: (0..q).map(|_| r.random_range(0..ids)).collect(),
            g_ids: (0..g).map(|_| r.random_range(0..ids)).collect(),
            q_cams: (0..q).map(|_| r.random_range(0..cams)).collect(),
            g_cams: (0..g).map(|_| r.random_range(0..cams)).collect(),
        }
    }
}

/// Two small sources and a small target; trains in well under a second.
pub fn small_scenario() -> ScenarioConfig {
    let source = DomainRecipe {
        n_identities: 12,
        eval_identities: 0,
        samples_per_identity: 8,
        n_cameras: 2,
        shift: 0.3,
        stretch: 1.3,
        bias_sigma: 0.3,
        camera_shift: 0.05,
        camera_bias_sigma: 0.05,
        noise_sigma: 0.1,
    };
    ScenarioConfig {
        backbone: BackboneConfig {
            layers: 1,
            dim: 16,
            tokens: 3,
            heads: 2,
            input_dim: 8,
            hidden: 32,
        },
        lora: LoraConfig::default(),
        train: TrainConfig {
            epochs_source: 3,
            epochs_adapt: 2,
            epochs_gate: 1,
            lr: 0.002,
            ..TrainConfig::default()
        },
        latent_dim: 6,
        sources: vec![source; 2],
        target: DomainRecipe {
            n_identities: 20,
            eval_identities: 8,
            ..source
        },
    }
}

pub struct World {
    pub cfg: ScenarioConfig,
    pub domains: Vec<SyntheticDataset>,
    pub sources: Vec<SourceModel>,
    pub experts: Vec<ExpertModel>,
}

impl World {
    pub fn target(&self) -> &SyntheticDataset {
        self.domains.last().expect("target domain")
    }
}

/// Pretrains every source and adapts one expert each.
pub fn small_world(seed: u64) -> World {
    let mut cfg = small_scenario();
    cfg.train.seed = seed;
    let domains = cfg.generate(seed).expect("valid recipes");
    let (target, sources) = domains.split_last().expect("target present");
    let models: Vec<SourceModel> = sources
        .iter()
        .map(|d| pretrain_source(&d.train, d.domain, cfg.backbone, &cfg.train, &mut |_| ()).unwrap().model)
        .collect();
    let experts = models
        .iter()
        .map(|m| adapt_expert(m, &target.train, &cfg.lora, &cfg.train, &mut |_| ()).unwrap().model)
        .collect();
    World {
        cfg,
        domains,
        sources: models,
        experts,
    }
}
