//! Toy pre-norm transformer encoder and BNNeck head.
//!
//! The backbone reads `κ − 1` content tokens, prepends a learned class token,
//! runs `L` pre-norm blocks and returns the class-token row of the final
//! layer norm as the feature `z`. Each block owns six projection matrices
//! (query, key, value, output, up, down); these are the only matrices that
//! ever carry low-rank adapters, and every one of them is routed through a
//! [`LinearHook`] so adapters and gates can be injected without touching the
//! forward code.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{l2_normalize, Tensor, NORM_EPS};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    /// Token count including the class token.
    pub tokens: usize,
    pub heads: usize,
    pub input_dim: usize,
    pub hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 32,
            tokens: 5,
            heads: 2,
            input_dim: 16,
            hidden: 128,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.layers,
            self.dim,
            self.tokens,
            self.heads,
            self.input_dim,
            self.hidden,
        ];
        if fields.iter().any(|&v| v == 0) {
            return Err(Error::Config(format!("all backbone sizes must be positive: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.tokens < 2 {
            return Err(Error::Config("need at least one content token".into()));
        }
        Ok(())
    }

    /// Content tokens per sample (class token excluded).
    pub fn content_tokens(&self) -> usize {
        self.tokens - 1
    }

    /// `(rows, cols)` of the projection in `slot`.
    pub fn slot_dims(&self, slot: Slot) -> (usize, usize) {
        match slot {
            Slot::Query | Slot::Key | Slot::Value | Slot::Output => (self.dim, self.dim),
            Slot::Up => (self.dim, self.hidden),
            Slot::Down => (self.hidden, self.dim),
        }
    }

    /// Every adapted projection, block-major in [`Slot::ALL`] order.
    pub fn layer_keys(&self) -> Vec<LayerKey> {
        (0..self.layers)
            .flat_map(|block| Slot::ALL.iter().map(move |&slot| LayerKey { block, slot }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::Query,
        Slot::Key,
        Slot::Value,
        Slot::Output,
        Slot::Up,
        Slot::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Query => "q",
            Slot::Key => "k",
            Slot::Value => "v",
            Slot::Output => "o",
            Slot::Up => "up",
            Slot::Down => "down",
        }
    }

    pub fn position(self) -> usize {
        self as usize
    }
}

/// Stable address of one adapted projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerKey {
    pub block: usize,
    pub slot: Slot,
}

impl LayerKey {
    /// Position in [`BackboneConfig::layer_keys`].
    pub fn index(self) -> usize {
        self.block * Slot::ALL.len() + self.slot.position()
    }

    pub fn name(self) -> String {
        format!("block{}.{}", self.block, self.slot.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_scale: Tensor,
    pub ln1_offset: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_offset: Tensor,
    /// Projections indexed by [`Slot`] position.
    pub weights: [Tensor; 6],
}

impl BlockParams {
    pub fn weight(&self, slot: Slot) -> &Tensor {
        &self.weights[slot.position()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub patch_embed: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_scale: Tensor,
    pub norm_offset: Tensor,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

impl BackboneParams {
    /// Deterministic Glorot-uniform initialization.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let patch_embed = glorot(&mut rng, config.input_dim, d);
        let cls_token = glorot(&mut rng, 1, d);
        let pos_embed = glorot(&mut rng, config.tokens, d);
        let blocks = (0..config.layers)
            .map(|_| {
                let weights = Slot::ALL.map(|slot| {
                    let (r, c) = config.slot_dims(slot);
                    glorot(&mut rng, r, c)
                });
                BlockParams {
                    ln1_scale: Tensor::filled(&[1, d], 1.0),
                    ln1_offset: Tensor::zeros(&[1, d]),
                    ln2_scale: Tensor::filled(&[1, d], 1.0),
                    ln2_offset: Tensor::zeros(&[1, d]),
                    weights,
                }
            })
            .collect();
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm_scale: Tensor::filled(&[1, d], 1.0),
            norm_offset: Tensor::zeros(&[1, d]),
        })
    }

    pub fn weight(&self, key: LayerKey) -> &Tensor {
        self.blocks[key.block].weight(key.slot)
    }

    /// All tensors with stable names, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{b}.ln1_scale"), &block.ln1_scale));
            out.push((format!("block{b}.ln1_offset"), &block.ln1_offset));
            out.push((format!("block{b}.ln2_scale"), &block.ln2_scale));
            out.push((format!("block{b}.ln2_offset"), &block.ln2_offset));
            for slot in Slot::ALL {
                out.push((format!("block{b}.{}", slot.name()), block.weight(slot)));
            }
        }
        out.push(("norm_scale".to_string(), &self.norm_scale));
        out.push(("norm_offset".to_string(), &self.norm_offset));
        out
    }

    /// Mutable tensors in the same order as [`BackboneParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_embed, &mut self.cls_token, &mut self.pos_embed];
        for block in &mut self.blocks {
            let BlockParams {
                ln1_scale,
                ln1_offset,
                ln2_scale,
                ln2_offset,
                weights,
            } = block;
            out.push(ln1_scale);
            out.push(ln1_offset);
            out.push(ln2_scale);
            out.push(ln2_offset);
            out.extend(weights.iter_mut());
        }
        out.push(&mut self.norm_scale);
        out.push(&mut self.norm_offset);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds every tensor to `tape`, as trainable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBackbone {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let patch_embed = leaf(&self.patch_embed);
        let cls_token = leaf(&self.cls_token);
        let pos_embed = leaf(&self.pos_embed);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                ln1_scale: leaf(&b.ln1_scale),
                ln1_offset: leaf(&b.ln1_offset),
                ln2_scale: leaf(&b.ln2_scale),
                ln2_offset: leaf(&b.ln2_offset),
                weights: [
                    leaf(&b.weights[0]),
                    leaf(&b.weights[1]),
                    leaf(&b.weights[2]),
                    leaf(&b.weights[3]),
                    leaf(&b.weights[4]),
                    leaf(&b.weights[5]),
                ],
            })
            .collect();
        let norm_scale = leaf(&self.norm_scale);
        let norm_offset = leaf(&self.norm_offset);
        BoundBackbone {
            config: self.config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm_scale,
            norm_offset,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub ln1_scale: Var,
    pub ln1_offset: Var,
    pub ln2_scale: Var,
    pub ln2_offset: Var,
    pub weights: [Var; 6],
}

/// Tape handles for a [`BackboneParams`].
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub config: BackboneConfig,
    pub patch_embed: Var,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BoundBlock>,
    pub norm_scale: Var,
    pub norm_offset: Var,
}

impl BoundBackbone {
    /// Handles in the order of [`BackboneParams::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_embed, self.cls_token, self.pos_embed];
        for b in &self.blocks {
            out.extend([b.ln1_scale, b.ln1_offset, b.ln2_scale, b.ln2_offset]);
            out.extend(b.weights);
        }
        out.push(self.norm_scale);
        out.push(self.norm_offset);
        out
    }
}

/// Computes `x · W` for one adapted projection. Implementations add
/// low-rank residuals or gated mixtures of them.
pub trait LinearHook {
    fn linear(&mut self, tape: &mut Tape, key: LayerKey, x: Var, weight: Var) -> Result<Var>;
}

/// Plain `x · W`, no adapters.
#[derive(Debug, Clone, Copy, Default)]
pub struct Plain;

impl LinearHook for Plain {
    fn linear(&mut self, tape: &mut Tape, _key: LayerKey, x: Var, weight: Var) -> Result<Var> {
        tape.matmul(x, weight)
    }
}

fn affine_norm(tape: &mut Tape, x: Var, scale: Var, offset: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LAYER_NORM_EPS);
    let n = tape.mul_row(n, scale)?;
    tape.add_row(n, offset)
}

/// Runs the encoder on one sample of `(κ − 1) × d_in` tokens and returns the
/// `1 × d` class-token feature.
pub fn forward_backbone(
    tape: &mut Tape,
    bb: &BoundBackbone,
    hook: &mut dyn LinearHook,
    tokens: &Tensor,
) -> Result<Var> {
    let cfg = bb.config;
    if tokens.rank() != 2
        || tokens.rows() != cfg.content_tokens()
        || tokens.cols() != cfg.input_dim
    {
        return Err(Error::Shape(format!(
            "tokens {:?}, expected [{}, {}]",
            tokens.shape(),
            cfg.content_tokens(),
            cfg.input_dim
        )));
    }
    let x = tape.constant(tokens.clone());
    let emb = tape.matmul(x, bb.patch_embed)?;
    let seq = tape.concat_rows(&[bb.cls_token, emb])?;
    let mut h = tape.add(seq, bb.pos_embed)?;

    let head_dim = cfg.dim / cfg.heads;
    let attn_scale = 1.0 / (head_dim as f64).sqrt();
    for (b, block) in bb.blocks.iter().enumerate() {
        let key = |slot| LayerKey { block: b, slot };
        let n1 = affine_norm(tape, h, block.ln1_scale, block.ln1_offset)?;
        let q = hook.linear(tape, key(Slot::Query), n1, block.weights[0])?;
        let k = hook.linear(tape, key(Slot::Key), n1, block.weights[1])?;
        let v = hook.linear(tape, key(Slot::Value), n1, block.weights[2])?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let (lo, hi) = (head * head_dim, (head + 1) * head_dim);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, attn_scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let o = hook.linear(tape, key(Slot::Output), merged, block.weights[3])?;
        h = tape.add(h, o)?;

        let n2 = affine_norm(tape, h, block.ln2_scale, block.ln2_offset)?;
        let up = hook.linear(tape, key(Slot::Up), n2, block.weights[4])?;
        let act = tape.gelu(up);
        let down = hook.linear(tape, key(Slot::Down), act, block.weights[5])?;
        h = tape.add(h, down)?;
    }
    let out = affine_norm(tape, h, bb.norm_scale, bb.norm_offset)?;
    tape.row(out, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// BatchNorm → `l2` normalization → bias-free linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub bn_scale: Tensor,
    pub bn_offset: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// `D × C`.
    pub classifier: Tensor,
}

impl HeadParams {
    /// Identity batch norm and a zero classifier.
    pub fn new(dim: usize, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        Ok(Self {
            bn_scale: Tensor::filled(&[1, dim], 1.0),
            bn_offset: Tensor::zeros(&[1, dim]),
            running_mean: Tensor::zeros(&[1, dim]),
            running_var: Tensor::filled(&[1, dim], 1.0),
            classifier: Tensor::zeros(&[dim, classes]),
        })
    }

    /// Head with random classifier columns of norm `scale`.
    pub fn random(dim: usize, classes: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut head = Self::new(dim, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                l2_normalize(&g, NORM_EPS).into_iter().map(|v| v * scale).collect()
            })
            .collect();
        head.classifier = Tensor::from_fn(dim, classes, |r, c| cols[c][r]);
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.classifier.rows()
    }

    pub fn classes(&self) -> usize {
        self.classifier.cols()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("bn_scale".into(), &self.bn_scale),
            ("bn_offset".into(), &self.bn_offset),
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
            ("classifier".into(), &self.classifier),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, train_classifier: bool, train_affine: bool) -> BoundHead {
        let mut leaf = |t: &Tensor, trainable: bool| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundHead {
            bn_scale: leaf(&self.bn_scale, train_affine),
            bn_offset: leaf(&self.bn_offset, train_affine),
            classifier: leaf(&self.classifier, train_classifier),
        }
    }

    /// Momentum update of the running statistics from a `B × D` batch.
    pub fn update_running_stats(&mut self, batch: &Tensor) {
        let (n, d) = (batch.rows(), batch.cols());
        if n < 2 {
            return;
        }
        for j in 0..d {
            let mean = (0..n).map(|i| batch.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (batch.get(i, j) - mean).powi(2)).sum::<f64>()
                / (n - 1) as f64;
            let rm = &mut self.running_mean.data_mut()[j];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean;
            let rv = &mut self.running_var.data_mut()[j];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var;
        }
    }

    /// Eval-mode head on a single feature: `(z_norm, logits)`.
    pub fn forward_eval(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let zv = tape.constant(Tensor::row_vector(z.to_vec()));
        let out = head_forward(&mut tape, self, &bound, zv, Mode::Eval)?;
        Ok((
            tape.value(out.z_norm).data().to_vec(),
            tape.value(out.logits).data().to_vec(),
        ))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub bn_scale: Var,
    pub bn_offset: Var,
    pub classifier: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub z_bn: Var,
    pub z_norm: Var,
    pub logits: Var,
}

/// Head forward on a `B × D` batch. Train mode normalizes with batch
/// statistics, eval mode with the running statistics.
pub fn head_forward(
    tape: &mut Tape,
    head: &HeadParams,
    bound: &BoundHead,
    z: Var,
    mode: Mode,
) -> Result<HeadOutput> {
    if head.classes() == 0 {
        return Err(Error::Config("classifier has zero classes".into()));
    }
    let d = tape.value(z).cols();
    if d != head.dim() {
        return Err(Error::Shape(format!("feature dim {d}, head expects {}", head.dim())));
    }
    let normalized = match mode {
        Mode::Train => {
            if tape.value(z).rows() < 2 {
                return Err(Error::Shape("train-mode batch norm needs at least two rows".into()));
            }
            let zt = tape.transpose(z);
            let n = tape.layer_norm_rows(zt, BN_EPS);
            tape.transpose(n)
        }
        Mode::Eval => {
            let neg_mean = tape.constant(head.running_mean.scale(-1.0));
            let inv_std = tape.constant(head.running_var.map(|v| 1.0 / (v + BN_EPS).sqrt()));
            let c = tape.add_row(z, neg_mean)?;
            tape.mul_row(c, inv_std)?
        }
    };
    let scaled = tape.mul_row(normalized, bound.bn_scale)?;
    let z_bn = tape.add_row(scaled, bound.bn_offset)?;
    let z_norm = tape.l2_normalize_rows(z_bn, NORM_EPS);
    let logits = tape.matmul(z_norm, bound.classifier)?;
    Ok(HeadOutput {
        z_bn,
        z_norm,
        logits,
    })
}
