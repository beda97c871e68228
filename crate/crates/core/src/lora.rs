//! Low-rank adapters and the weight algebra around them.
//!
//! An adapter on a frozen `n × m` projection `W₀` holds `A ∈ ℝ^{n×r}` and
//! `B ∈ ℝ^{r×m}` and contributes `ΔW = (β / r) · A · B`. Adapters start with
//! `B = 0`, so an untrained expert reproduces its source backbone exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::model::{BackboneConfig, BackboneParams, HeadParams, LayerKey, LinearHook};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scale numerator; the residual is multiplied by `beta / rank`.
    pub beta: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            beta: 16.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("adapter scale must be finite".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.beta / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub key: LayerKey,
    /// `n × r`.
    pub a: Tensor,
    /// `r × m`.
    pub b: Tensor,
    pub rank: usize,
    pub beta: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    /// Kaiming-uniform `A`, zero `B`.
    pub fn init(key: LayerKey, n: usize, m: usize, cfg: &LoraConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.rank > n.min(m) {
            return Err(Error::Config(format!(
                "rank {} exceeds min({n}, {m}) for {}",
                cfg.rank,
                key.name()
            )));
        }
        let bound = (1.0 / n as f64).sqrt() * 3f64.sqrt();
        let a = Tensor::from_fn(n, cfg.rank, |_, _| rng.random_range(-bound..bound));
        Ok(Self {
            key,
            a,
            b: Tensor::zeros(&[cfg.rank, m]),
            rank: cfg.rank,
            beta: cfg.beta,
            dropout: cfg.dropout,
        })
    }

    /// Builds an adapter from explicit factors.
    pub fn from_factors(key: LayerKey, a: Tensor, b: Tensor, beta: f64, dropout: f64) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return shape_err(format!("factors {:?} and {:?} do not chain", a.shape(), b.shape()));
        }
        let rank = a.cols();
        if rank > a.rows().min(b.cols()) {
            return Err(Error::Config(format!("rank {rank} exceeds the projection size")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            key,
            a,
            b,
            rank,
            beta,
            dropout,
        })
    }

    pub fn scale(&self) -> f64 {
        self.beta / self.rank as f64
    }

    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.cols()
    }

    /// `r (n + m)`.
    pub fn param_count(&self) -> usize {
        self.rank * (self.in_dim() + self.out_dim())
    }
}

/// `ΔW = (β / r) · A · B`.
pub fn lora_delta(adapter: &LoraAdapter) -> Tensor {
    matmul(&adapter.a, &adapter.b)
        .expect("adapter factors chain by construction")
        .scale(adapter.scale())
}

/// `W₀ + ΔW`.
pub fn adapted_weight(w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = lora_delta(adapter);
    if !w0.same_shape(&delta) {
        return shape_err(format!(
            "base weight {:?} vs adapter delta {:?}",
            w0.shape(),
            delta.shape()
        ));
    }
    w0.add(&delta)
}

/// One expert: an adapter on every adapted projection of a backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAdapterSet {
    pub source_id: usize,
    /// Indexed by [`LayerKey::index`].
    pub adapters: Vec<LoraAdapter>,
}

impl ExpertAdapterSet {
    pub fn init(config: &BackboneConfig, lora: &LoraConfig, source_id: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapters = config
            .layer_keys()
            .into_iter()
            .map(|key| {
                let (n, m) = config.slot_dims(key.slot);
                LoraAdapter::init(key, n, m, lora, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source_id,
            adapters,
        })
    }

    pub fn get(&self, key: LayerKey) -> &LoraAdapter {
        &self.adapters[key.index()]
    }

    /// Checks the set covers every key of `config` exactly once with
    /// matching shapes.
    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let keys = config.layer_keys();
        if keys.len() != self.adapters.len() {
            return Err(Error::Incompatible(format!(
                "{} adapters for {} adapted layers",
                self.adapters.len(),
                keys.len()
            )));
        }
        for (key, adapter) in keys.iter().zip(&self.adapters) {
            let (n, m) = config.slot_dims(key.slot);
            if adapter.key != *key || adapter.in_dim() != n || adapter.out_dim() != m {
                return Err(Error::Incompatible(format!(
                    "adapter {} does not fit {}",
                    adapter.key.name(),
                    key.name()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn deltas(&self) -> Vec<Tensor> {
        self.adapters.iter().map(lora_delta).collect()
    }

    pub fn factors_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect()
    }

    /// Binds every factor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.adapters
            .iter()
            .map(|a| (tape.param(a.a.clone()), tape.param(a.b.clone())))
            .collect()
    }
}

/// Elementwise mean of `s` backbones with identical configs.
pub fn average_backbones(backbones: &[BackboneParams]) -> Result<BackboneParams> {
    let Some(first) = backbones.first() else {
        return Err(Error::Incompatible("cannot average zero backbones".into()));
    };
    if let Some(b) = backbones.iter().find(|b| b.config != first.config) {
        return Err(Error::Incompatible(format!(
            "backbone configs differ: {:?} vs {:?}",
            first.config, b.config
        )));
    }
    let s = backbones.len() as f64;
    let mut out = first.clone();
    {
        let mut targets = out.tensors_mut();
        for t in targets.iter_mut() {
            t.data_mut().fill(0.0);
        }
        for b in backbones {
            for (t, (_, src)) in targets.iter_mut().zip(b.named_tensors()) {
                t.axpy(1.0, src)?;
            }
        }
        for t in targets.iter_mut() {
            for v in t.data_mut() {
                *v /= s;
            }
        }
    }
    Ok(out)
}

/// Averages the batch-norm parameters and running statistics of several
/// heads; the classifier of the result is a zero `D × 1` placeholder.
pub fn average_head_norms(heads: &[HeadParams]) -> Result<HeadParams> {
    let Some(first) = heads.first() else {
        return Err(Error::Incompatible("cannot average zero heads".into()));
    };
    let d = first.dim();
    if heads.iter().any(|h| h.dim() != d) {
        return Err(Error::Incompatible("head feature dims differ".into()));
    }
    let mean = |pick: fn(&HeadParams) -> &Tensor| -> Result<Tensor> {
        let mut acc = Tensor::zeros(pick(first).shape());
        for h in heads {
            acc.axpy(1.0 / heads.len() as f64, pick(h))?;
        }
        Ok(acc)
    };
    let mut out = HeadParams::new(d, 1)?;
    out.bn_scale = mean(|h| &h.bn_scale)?;
    out.bn_offset = mean(|h| &h.bn_offset)?;
    out.running_mean = mean(|h| &h.running_mean)?;
    out.running_var = mean(|h| &h.running_var)?;
    Ok(out)
}

/// `Σ αᵢ ΔWᵢ` for `α` on the probability simplex.
pub fn merge_adapters(deltas: &[Tensor], alpha: &[f64]) -> Result<Tensor> {
    if deltas.is_empty() || deltas.len() != alpha.len() {
        return shape_err(format!("{} deltas with {} coefficients", deltas.len(), alpha.len()));
    }
    let total: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("coefficients {alpha:?} are not on the simplex")));
    }
    let mut out = Tensor::zeros(deltas[0].shape());
    for (d, &a) in deltas.iter().zip(alpha) {
        out.axpy(a, d)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub backbone_params: usize,
    pub per_expert_params: Vec<usize>,
    /// Mean per-expert adapter count divided by the backbone count.
    pub ratio: f64,
}

pub fn param_count_report(backbone: &BackboneParams, experts: &[ExpertAdapterSet]) -> ParamReport {
    let backbone_params = backbone.param_count();
    let per_expert_params: Vec<usize> = experts.iter().map(ExpertAdapterSet::param_count).collect();
    let mean = if per_expert_params.is_empty() {
        0.0
    } else {
        per_expert_params.iter().sum::<usize>() as f64 / per_expert_params.len() as f64
    };
    ParamReport {
        backbone_params,
        per_expert_params,
        ratio: mean / backbone_params as f64,
    }
}

/// Stage-1 hook: `x · W₀ + (β/r) · drop(x) · A · B`.
pub struct LoraHook<'a> {
    pub set: &'a ExpertAdapterSet,
    pub vars: Vec<(Var, Var)>,
    /// Dropout mask source; `None` disables dropout (eval mode).
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> LoraHook<'a> {
    pub fn new(tape: &mut Tape, set: &'a ExpertAdapterSet, trainable: bool, dropout_rng: Option<&'a mut ChaCha8Rng>) -> Self {
        let vars = if trainable {
            set.bind(tape)
        } else {
            set.adapters
                .iter()
                .map(|a| (tape.constant(a.a.clone()), tape.constant(a.b.clone())))
                .collect()
        };
        Self {
            set,
            vars,
            dropout_rng,
        }
    }
}

impl LinearHook for LoraHook<'_> {
    fn linear(&mut self, tape: &mut Tape, key: LayerKey, x: Var, weight: Var) -> Result<Var> {
        let base = tape.matmul(x, weight)?;
        let adapter = self.set.get(key);
        let (a, b) = self.vars[key.index()];
        let input = match self.dropout_rng.as_deref_mut() {
            Some(rng) if adapter.dropout > 0.0 => {
                let keep = 1.0 - adapter.dropout;
                let shape = tape.value(x).shape().to_vec();
                let mut mask = Tensor::zeros(&shape);
                for m in mask.data_mut() {
                    *m = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                }
                let mask = tape.constant(mask);
                tape.mul(x, mask)?
            }
            _ => x,
        };
        let low = tape.matmul(input, a)?;
        let res = tape.matmul(low, b)?;
        let res = tape.scale(res, adapter.scale());
        tape.add(base, res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_backbone, Plain, Slot};

    fn key() -> LayerKey {
        LayerKey {
            block: 0,
            slot: Slot::Query,
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_product(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ad = LoraAdapter::init(key(), 8, 6, &LoraConfig::default(), &mut rng).unwrap();
        assert!(lora_delta(&ad).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_is_beta_over_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 8, 4);
        let b = random(&mut rng, 4, 8);
        let ad = LoraAdapter::from_factors(key(), a.clone(), b.clone(), 16.0, 0.0).unwrap();
        assert_eq!(ad.scale(), 4.0);
        let expect = naive_product(&a, &b).scale(4.0);
        assert!(lora_delta(&ad).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn rank_one_outer_product() {
        let a = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let ad = LoraAdapter::from_factors(key(), a, b, 1.0, 0.0).unwrap();
        assert_eq!(lora_delta(&ad).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn adapted_weight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = random(&mut rng, 6, 5);
        let zero = LoraAdapter::init(key(), 6, 5, &LoraConfig { rank: 2, ..Default::default() }, &mut rng).unwrap();
        assert_eq!(adapted_weight(&w0, &zero).unwrap(), w0);

        let ad = LoraAdapter::from_factors(key(), random(&mut rng, 6, 2), random(&mut rng, 2, 5), 3.0, 0.0).unwrap();
        let delta = lora_delta(&ad);
        assert_eq!(adapted_weight(&Tensor::zeros(&[6, 5]), &ad).unwrap(), delta);
        let w = adapted_weight(&w0, &ad).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                assert!((w.get(i, j) - (w0.get(i, j) + delta.get(i, j))).abs() < 1e-12);
            }
        }
        assert!(matches!(adapted_weight(&Tensor::zeros(&[5, 5]), &ad), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_adapters_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LoraConfig { rank: 7, ..Default::default() };
        assert!(LoraAdapter::init(key(), 6, 8, &cfg, &mut rng).is_err());
        let cfg = LoraConfig { dropout: 1.0, ..Default::default() };
        assert!(LoraAdapter::init(key(), 6, 8, &cfg, &mut rng).is_err());
    }

    #[test]
    fn averaging_cases() {
        let cfg = BackboneConfig::default();
        let a = BackboneParams::init(cfg, 1).unwrap();
        let same = average_backbones(&[a.clone(), a.clone(), a.clone()]).unwrap();
        for ((_, x), (_, y)) in same.named_tensors().into_iter().zip(a.named_tensors()) {
            assert!(x.max_abs_diff(y) <= 1e-15);
        }

        let mut neg = a.clone();
        for t in neg.tensors_mut() {
            *t = t.scale(-1.0);
        }
        let zero = average_backbones(&[a.clone(), neg]).unwrap();
        for (_, t) in zero.named_tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }

        let b = BackboneParams::init(cfg, 2).unwrap();
        let c = BackboneParams::init(cfg, 3).unwrap();
        let avg = average_backbones(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let (na, nb, nc, nv) = (a.named_tensors(), b.named_tensors(), c.named_tensors(), avg.named_tensors());
        for i in 0..nv.len() {
            for k in 0..nv[i].1.numel() {
                let expect = (na[i].1.data()[k] + nb[i].1.data()[k] + nc[i].1.data()[k]) / 3.0;
                assert!((nv[i].1.data()[k] - expect).abs() < 1e-12);
            }
        }

        let other = BackboneParams::init(BackboneConfig { hidden: 64, ..cfg }, 1).unwrap();
        assert!(matches!(average_backbones(&[a, other]), Err(Error::Incompatible(_))));
        assert!(average_backbones(&[]).is_err());
    }

    #[test]
    fn merge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let deltas: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 4, 3)).collect();
        assert_eq!(merge_adapters(&deltas, &[0.0, 1.0, 0.0]).unwrap(), deltas[1]);
        let same = vec![deltas[0].clone(); 3];
        assert!(merge_adapters(&same, &[0.2, 0.3, 0.5]).unwrap().max_abs_diff(&deltas[0]) < 1e-12);
        let m = merge_adapters(&deltas, &[0.2, 0.3, 0.5]).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let expect = 0.2 * deltas[0].get(i, j) + 0.3 * deltas[1].get(i, j) + 0.5 * deltas[2].get(i, j);
                assert!((m.get(i, j) - expect).abs() < 1e-12);
            }
        }
        assert!(matches!(merge_adapters(&deltas, &[0.5, 0.5, 0.5]), Err(Error::Domain(_))));
        assert!(matches!(merge_adapters(&deltas, &[1.5, -0.5, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn param_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ad = LoraAdapter::init(key(), 32, 32, &LoraConfig::default(), &mut rng).unwrap();
        assert_eq!(ad.param_count(), 256);
        assert_eq!(ad.a.numel() + ad.b.numel(), 256);
        let ad8 = LoraAdapter::init(key(), 32, 32, &LoraConfig { rank: 8, ..Default::default() }, &mut rng).unwrap();
        assert_eq!(ad8.param_count(), 512);

        let cfg = BackboneConfig::default();
        let bb = BackboneParams::init(cfg, 0).unwrap();
        let mut last = 0.0;
        for r in [1, 2, 4] {
            let set = ExpertAdapterSet::init(&cfg, &LoraConfig { rank: r, ..Default::default() }, 0, 0).unwrap();
            let stored: usize = set.adapters.iter().map(|a| a.a.numel() + a.b.numel()).sum();
            assert_eq!(set.param_count(), stored);
            let report = param_count_report(&bb, &[set]);
            assert!(report.ratio < 1.0);
            assert!(report.ratio > last);
            last = report.ratio;
        }
    }

    #[test]
    fn zero_adapters_match_plain_forward() {
        let cfg = BackboneConfig::default();
        let bb = BackboneParams::init(cfg, 7).unwrap();
        let set = ExpertAdapterSet::init(&cfg, &LoraConfig::default(), 0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let x = random(&mut rng, cfg.content_tokens(), cfg.input_dim);
            let mut tape = Tape::new();
            let bound = bb.bind(&mut tape, false);
            let plain = forward_backbone(&mut tape, &bound, &mut Plain, &x).unwrap();
            let mut hook = LoraHook::new(&mut tape, &set, false, None);
            let adapted = forward_backbone(&mut tape, &bound, &mut hook, &x).unwrap();
            assert!(tape.value(plain).max_abs_diff(tape.value(adapted)) <= 1e-12);
        }
    }

    #[test]
    fn lora_hook_matches_adapted_weight_path() {
        let cfg = BackboneConfig::default();
        let bb = BackboneParams::init(cfg, 7).unwrap();
        let mut set = ExpertAdapterSet::init(&cfg, &LoraConfig::default(), 0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for ad in &mut set.adapters {
            ad.b = Tensor::from_fn(ad.b.rows(), ad.b.cols(), |_, _| rng.random_range(-0.05..0.05));
        }
        let mut merged = bb.clone();
        for key in cfg.layer_keys() {
            let w = adapted_weight(bb.weight(key), set.get(key)).unwrap();
            merged.blocks[key.block].weights[key.slot as usize] = w;
        }
        let x = random(&mut rng, cfg.content_tokens(), cfg.input_dim);
        let mut tape = Tape::new();
        let bound = bb.bind(&mut tape, false);
        let mut hook = LoraHook::new(&mut tape, &set, false, None);
        let z1 = forward_backbone(&mut tape, &bound, &mut hook, &x).unwrap();
        let bound2 = merged.bind(&mut tape, false);
        let z2 = forward_backbone(&mut tape, &bound2, &mut Plain, &x).unwrap();
        assert!(tape.value(z1).max_abs_diff(tape.value(z2)) < 1e-10);
    }

    proptest::proptest! {
        #[test]
        fn merge_is_permutation_equivariant(seed in 0u64..1000, raw in proptest::collection::vec(0.01f64..1.0, 4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let deltas: Vec<Tensor> = (0..4).map(|_| random(&mut rng, 3, 3)).collect();
            let total: f64 = raw.iter().sum();
            let alpha: Vec<f64> = raw.iter().map(|a| a / total).collect();
            let base = merge_adapters(&deltas, &alpha).unwrap();
            let perm = [2usize, 0, 3, 1];
            let pd: Vec<Tensor> = perm.iter().map(|&i| deltas[i].clone()).collect();
            let pa: Vec<f64> = perm.iter().map(|&i| alpha[i]).collect();
            proptest::prop_assert!(merge_adapters(&pd, &pa).unwrap().max_abs_diff(&base) <= 1e-12);
        }
    }
}
