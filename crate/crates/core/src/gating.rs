//! Gated fusion of expert adapters over an averaged backbone.
//!
//! Per adapted layer and per sample, every expert's residual `x · ΔWᵢ` is
//! row-normalized, flattened token-major and scored against one projection
//! vector. The softmax of those scores (with a learned temperature) mixes
//! the residuals on top of the frozen averaged weight.

use crate::error::{shape_err, Error, Result};
use crate::lora::ExpertAdapterSet;
use crate::model::{BackboneConfig, LayerKey, LinearHook};
use crate::tape::{Tape, Var};
use crate::tensor::{l2_normalize, matmul, softmax, softplus, Tensor, NORM_EPS};

/// Lower bound added to the softplus temperature.
pub const TAU_FLOOR: f64 = 0.01;

/// Raw temperature parameter giving `τ = 1`.
pub fn unit_tau_theta() -> f64 {
    ((1.0 - TAU_FLOOR).exp() - 1.0).ln()
}

/// `softplus(θ) + 0.01`, always positive.
pub fn tau_from_theta(theta: f64) -> f64 {
    softplus(theta) + TAU_FLOOR
}

/// Gate of one adapted layer. `projection` is stored `κ × d_out`; its
/// row-major data is the token-major flattened projection vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGate {
    pub projection: Tensor,
    pub theta: f64,
}

impl LayerGate {
    /// Zero projection (uniform mixing) and unit temperature.
    pub fn new(tokens: usize, out_dim: usize) -> Self {
        Self {
            projection: Tensor::zeros(&[tokens, out_dim]),
            theta: unit_tau_theta(),
        }
    }

    pub fn tau(&self) -> f64 {
        tau_from_theta(self.theta)
    }

    pub fn param_count(&self) -> usize {
        self.projection.numel() + 1
    }
}

/// One gate per adapted layer, indexed by [`LayerKey::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub layers: Vec<LayerGate>,
}

impl GateParams {
    pub fn new(config: &BackboneConfig) -> Self {
        let layers = config
            .layer_keys()
            .into_iter()
            .map(|key| LayerGate::new(config.tokens, config.slot_dims(key.slot).1))
            .collect();
        Self { layers }
    }

    pub fn get(&self, key: LayerKey) -> &LayerGate {
        &self.layers[key.index()]
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let keys = config.layer_keys();
        if keys.len() != self.layers.len() {
            return Err(Error::Incompatible(format!(
                "{} gates for {} adapted layers",
                self.layers.len(),
                keys.len()
            )));
        }
        for (key, gate) in keys.iter().zip(&self.layers) {
            let want = [config.tokens, config.slot_dims(key.slot).1];
            if gate.projection.shape() != want {
                return Err(Error::Incompatible(format!(
                    "gate {} has shape {:?}, expected {want:?}",
                    key.name(),
                    gate.projection.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerGate::param_count).sum()
    }

    /// Binds every projection and temperature parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|g| {
                let theta = Tensor::scalar(g.theta).as_matrix();
                if trainable {
                    (tape.param(g.projection.clone()), tape.param(theta))
                } else {
                    (tape.constant(g.projection.clone()), tape.constant(theta))
                }
            })
            .collect()
    }
}

/// `eᵢ = x · ΔWᵢ` for every expert.
pub fn expert_residuals(x: &Tensor, deltas: &[Tensor]) -> Result<Vec<Tensor>> {
    deltas.iter().map(|d| matmul(x, d)).collect()
}

/// `softmax(E · p / τ)` where row `i` of `E` is the row-normalized,
/// token-major flattening of residual `i`.
pub fn gate_coefficients(residuals: &[Tensor], projection: &Tensor, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let logits = residuals
        .iter()
        .map(|e| {
            if e.numel() != projection.numel() {
                return shape_err(format!(
                    "residual {:?} vs projection {:?}",
                    e.shape(),
                    projection.shape()
                ));
            }
            let mut score = 0.0;
            for r in 0..e.rows() {
                let n = l2_normalize(e.row(r), NORM_EPS);
                let p = &projection.data()[r * e.cols()..(r + 1) * e.cols()];
                score += n.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok(score)
        })
        .collect::<Result<Vec<_>>>()?;
    softmax(&logits, tau)
}

/// `x · W̄₀ + Σ αᵢ eᵢ` with `α` computed from this input's residuals.
/// Returns the output and the coefficients.
pub fn gated_forward(x: &Tensor, base: &Tensor, deltas: &[Tensor], gate: &LayerGate) -> Result<(Tensor, Vec<f64>)> {
    if deltas.iter().any(|d| !d.same_shape(base)) {
        return shape_err("expert deltas must match the base weight");
    }
    let residuals = expert_residuals(x, deltas)?;
    let alpha = gate_coefficients(&residuals, &gate.projection, gate.tau())?;
    let mut y = matmul(x, base)?;
    for (e, &a) in residuals.iter().zip(&alpha) {
        y.axpy(a, e)?;
    }
    Ok((y, alpha))
}

/// Regroups expert deltas by layer: `out[key.index()][expert]`.
pub fn deltas_by_layer(experts: &[ExpertAdapterSet], config: &BackboneConfig) -> Result<Vec<Vec<Tensor>>> {
    if experts.is_empty() {
        return Err(Error::Incompatible("gating needs at least one expert".into()));
    }
    for e in experts {
        e.validate(config)?;
    }
    let per_expert: Vec<Vec<Tensor>> = experts.iter().map(ExpertAdapterSet::deltas).collect();
    Ok((0..per_expert[0].len())
        .map(|k| per_expert.iter().map(|d| d[k].clone()).collect())
        .collect())
}

/// Tape hook for the gated forward. Deltas are frozen; the gate is bound by
/// the caller (trainable or not).
pub struct GatedHook {
    deltas: Vec<Vec<Var>>,
    gate: Vec<(Var, Var)>,
    /// `α` of the most recent sample, per layer.
    pub last_alpha: Vec<Vec<f64>>,
}

impl GatedHook {
    pub fn new(tape: &mut Tape, deltas: &[Vec<Tensor>], gate: Vec<(Var, Var)>) -> Result<Self> {
        if deltas.len() != gate.len() {
            return shape_err(format!("{} delta groups for {} gates", deltas.len(), gate.len()));
        }
        let deltas: Vec<Vec<Var>> = deltas
            .iter()
            .map(|group| group.iter().map(|d| tape.constant(d.clone())).collect())
            .collect();
        let last_alpha = vec![Vec::new(); gate.len()];
        Ok(Self {
            deltas,
            gate,
            last_alpha,
        })
    }
}

impl LinearHook for GatedHook {
    fn linear(&mut self, tape: &mut Tape, key: LayerKey, x: Var, weight: Var) -> Result<Var> {
        let k = key.index();
        let (projection, theta) = self.gate[k];
        let mut residuals = Vec::with_capacity(self.deltas[k].len());
        let mut scores = Vec::with_capacity(self.deltas[k].len());
        for &d in &self.deltas[k] {
            let e = tape.matmul(x, d)?;
            let n = tape.l2_normalize_rows(e, NORM_EPS);
            scores.push(tape.dot(n, projection)?);
            residuals.push(e);
        }
        let scores = tape.concat_cols(&scores)?;
        let tau = tape.softplus(theta);
        let tau = tape.add_const(tau, TAU_FLOOR);
        let inv_tau = tape.recip(tau);
        let scaled = tape.mul_scalar(scores, inv_tau)?;
        let alpha = tape.softmax_rows(scaled);
        self.last_alpha[k] = tape.value(alpha).data().to_vec();

        let mut y = tape.matmul(x, weight)?;
        for (i, &e) in residuals.iter().enumerate() {
            let a = tape.element(alpha, i)?;
            let part = tape.mul_scalar(e, a)?;
            y = tape.add(y, part)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateCost {
    pub gate_params: usize,
    /// Per-token-router reference, `Σ s² κ d_out`; for comparison only.
    pub mole_reference_params: usize,
}

pub fn gate_param_cost(config: &BackboneConfig, experts: usize) -> GateCost {
    let mut cost = GateCost {
        gate_params: 0,
        mole_reference_params: 0,
    };
    for key in config.layer_keys() {
        let width = config.tokens * config.slot_dims(key.slot).1;
        cost.gate_params += width + 1;
        cost.mole_reference_params += experts * experts * width;
    }
    cost
}
