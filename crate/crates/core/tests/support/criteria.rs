//! Acceptance checks shared by the per-crate tests and the acceptance runner.
//! Each returns a verdict with the measured numbers; none of them panic on a
//! failed check.

use std::time::{Duration, Instant};

use rand::Rng;
use sage_core::data::Checkpoint;
use sage_core::eval::cmc_map;
use sage_core::gating::{gate_coefficients, gate_param_cost, GateParams};
use sage_core::lora::{
    adapted_weight, average_backbones, lora_delta, merge_adapters, param_count_report, ExpertAdapterSet, LoraAdapter,
    LoraConfig,
};
use sage_core::model::{BackboneConfig, BackboneParams, LayerKey, Slot};
use sage_core::pipeline::artifacts::{backbone_checkpoint, merged_frozen_checkpoint};
use sage_core::pipeline::scenario::{run_trend, ScenarioConfig, TrendOutcome};
use sage_core::pipeline::{adapt_expert, build_merged_model, train_gate};
use sage_core::pseudo::{dbscan, select_eps};
use sage_core::tensor::matmul;
use sage_core::Tensor;

use super::{
    dbscan_oracle, random_distance_instance, random_tensor, relative_gradient_error, retrieval_oracle, rng,
    small_world, to_tensor, AdaptationObjective, GateObjective, RetrievalInstance, SourceObjective,
};

#[derive(Debug, Clone)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Verdict {
    fn new(pass: bool, detail: String, started: Instant) -> Self {
        Self {
            pass,
            detail,
            elapsed: started.elapsed(),
        }
    }

    /// Adds a wall-clock budget to the verdict.
    fn within(mut self, budget: Duration) -> Self {
        if self.elapsed >= budget {
            self.pass = false;
            self.detail = format!("{}; over budget {:.1}s", self.detail, budget.as_secs_f64());
        }
        self
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const GRADIENT_INSTANCES: u64 = 20;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

pub fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let worst = |f: &dyn Fn(u64) -> f64| (0..GRADIENT_INSTANCES).map(f).fold(0.0, f64::max);
    let source = worst(&|s| relative_gradient_error(&mut SourceObjective::random(s), 60, s));
    let adapt = worst(&|s| relative_gradient_error(&mut AdaptationObjective::random(100 + s), 60, s));
    let gate = worst(&|s| relative_gradient_error(&mut GateObjective::random(200 + s), 60, s));
    let pass = [source, adapt, gate].iter().all(|&e| e < GRADIENT_TOLERANCE);
    Verdict::new(
        pass,
        format!(
            "worst relative error over {GRADIENT_INSTANCES} instances: source {source:.1e}, adaptation {adapt:.1e}, gate {gate:.1e}"
        ),
        t,
    )
    .within(Duration::from_secs(30))
}

fn negated(b: &BackboneParams) -> BackboneParams {
    let mut out = b.clone();
    for t in out.tensors_mut() {
        for v in t.data_mut() {
            *v = -*v;
        }
    }
    out
}

pub fn merge_algebra() -> Verdict {
    let t = Instant::now();
    let mut r = rng(31);
    let (mut one_hot, mut fixed, mut cancel) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..50u64 {
        let (n, m) = (r.random_range(3..10), r.random_range(3..10));
        let rank = r.random_range(1..=n.min(m).min(4));
        let key = LayerKey {
            block: 0,
            slot: Slot::ALL[case as usize % Slot::ALL.len()],
        };
        let base = random_tensor(&mut r, n, m, 1.0);
        let x = random_tensor(&mut r, 3, n, 1.0);
        let s = r.random_range(1..5);
        let adapters: Vec<LoraAdapter> = (0..s)
            .map(|_| {
                let a = random_tensor(&mut r, n, rank, 1.0);
                let b = random_tensor(&mut r, rank, m, 1.0);
                LoraAdapter::from_factors(key, a, b, 16.0, 0.0).expect("valid factors")
            })
            .collect();
        let deltas: Vec<Tensor> = adapters.iter().map(lora_delta).collect();
        for (i, adapter) in adapters.iter().enumerate() {
            let mut alpha = vec![0.0; s];
            alpha[i] = 1.0;
            let merged = base.add(&merge_adapters(&deltas, &alpha).unwrap()).unwrap();
            let via_merge = matmul(&x, &merged).unwrap();
            let via_expert = matmul(&x, &adapted_weight(&base, adapter).unwrap()).unwrap();
            one_hot = one_hot.max(max_diff(&via_merge, &via_expert));
        }
        let same = vec![deltas[0].clone(); s];
        let uniform = vec![1.0 / s as f64; s];
        fixed = fixed.max(max_diff(&merge_adapters(&same, &uniform).unwrap(), &deltas[0]));
    }
    for seed in 0..5 {
        let w = BackboneParams::init(BackboneConfig::default(), seed).unwrap();
        let avg = average_backbones(&[w.clone(), negated(&w)]).unwrap();
        for (_, tensor) in avg.named_tensors() {
            cancel = cancel.max(tensor.data().iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
    }
    let pass = one_hot <= 1e-12 && fixed <= 1e-12 && cancel <= 1e-12;
    Verdict::new(
        pass,
        format!("one-hot {one_hot:.1e}, identical-uniform {fixed:.1e}, W and -W average {cancel:.1e}"),
        t,
    )
    .within(Duration::from_secs(1))
}

pub fn gate_invariants() -> Verdict {
    let t = Instant::now();
    let mut r = rng(41);
    let (mut scaled, mut uniform_exact) = (0.0f64, true);
    for _ in 0..200 {
        let (rows, cols, s) = (r.random_range(1..6), r.random_range(1..9), r.random_range(1..6));
        let residuals: Vec<Tensor> = (0..s).map(|_| random_tensor(&mut r, rows, cols, 1.0)).collect();
        let zero = gate_coefficients(&residuals, &Tensor::zeros(&[rows, cols]), r.random_range(0.05..5.0)).unwrap();
        uniform_exact &= zero.iter().all(|&a| a == 1.0 / s as f64);
        let p = random_tensor(&mut r, rows, cols, 1.0);
        let tau = r.random_range(0.05..5.0);
        let base = gate_coefficients(&residuals, &p, tau).unwrap();
        let mut moved = residuals.clone();
        let pick = r.random_range(0..s);
        for row in 0..rows {
            let c = 10f64.powf(r.random_range(-3.0..3.0));
            for v in &mut moved[pick].data_mut()[row * cols..(row + 1) * cols] {
                *v *= c;
            }
        }
        let after = gate_coefficients(&moved, &p, tau).unwrap();
        scaled = scaled.max(base.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let w = small_world(5);
    let merged = build_merged_model(&w.sources, &w.experts).unwrap();
    let (sum_err, checks) = match train_gate(merged, &w.target().train, &w.cfg.train, &mut |_| ()) {
        Ok(report) => (report.max_alpha_sum_error, report.alpha_checks),
        Err(e) => {
            return Verdict::new(false, format!("gate training failed: {e}"), t);
        }
    };
    let pass = sum_err <= 1e-9 && checks > 0 && uniform_exact && scaled <= 1e-9;
    Verdict::new(
        pass,
        format!(
            "max |sum(alpha) - 1| {sum_err:.1e} over {checks} sample-layer checks; zero projection uniform: {uniform_exact}; row rescaling {scaled:.1e}"
        ),
        t,
    )
}

pub fn dbscan_oracle_check() -> Verdict {
    let t = Instant::now();
    let mut r = rng(11);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = r.random_range(2..=64);
        let rows = random_distance_instance(&mut r, n);
        let eps = select_eps(&to_tensor(&rows), r.random_range(1.0..30.0)).unwrap().max(1e-9);
        let min_pts = r.random_range(1..=6);
        let got = dbscan(&to_tensor(&rows), eps, min_pts).unwrap();
        if got.labels != dbscan_oracle(&rows, eps, min_pts) {
            mismatches += 1;
        }
    }
    Verdict::new(mismatches == 0, format!("{mismatches}/200 instances differ from the oracle"), t)
        .within(Duration::from_secs(30))
}

pub fn retrieval_oracle_check() -> Verdict {
    let t = Instant::now();
    let mut r = rng(21);
    let ranks = [1, 3, 5, 10];
    let mut worst = 0.0f64;
    let mut count_mismatch = 0;
    for _ in 0..100 {
        let inst = RetrievalInstance::random(&mut r);
        let dist = to_tensor(&inst.dist);
        let got = cmc_map(&dist, &inst.q_ids, &inst.g_ids, &inst.q_cams, &inst.g_cams, &ranks).unwrap();
        let (map, cmc, evaluated, skipped) =
            retrieval_oracle(&inst.dist, &inst.q_ids, &inst.g_ids, &inst.q_cams, &inst.g_cams, &ranks);
        worst = worst.max((got.map - map).abs());
        for (k, &rank) in ranks.iter().enumerate() {
            worst = worst.max((got.rank(rank).unwrap() - cmc[k]).abs());
        }
        if (got.queries_evaluated, got.queries_skipped) != (evaluated, skipped) {
            count_mismatch += 1;
        }
    }
    let hand = cmc_map(&to_tensor(&[vec![0.1, 0.2, 0.3]]), &[7], &[1, 7, 2], &[0], &[1, 1, 1], &[1]).unwrap();
    let hand_ok = hand.map == 0.5;
    let pass = worst <= 1e-12 && count_mismatch == 0 && hand_ok;
    Verdict::new(
        pass,
        format!("max deviation {worst:.1e} over 100 instances; query-count mismatches {count_mismatch}; rank-2-of-3 AP = {}", hand.map),
        t,
    )
    .within(Duration::from_secs(10))
}

fn bytes(c: &Checkpoint) -> Vec<u8> {
    c.encode()
}

pub fn freeze_contracts() -> Verdict {
    let t = Instant::now();
    let w = small_world(6);
    let mut stage_one = true;
    for source in &w.sources {
        let before = bytes(&backbone_checkpoint(&source.backbone));
        match adapt_expert(source, &w.target().train, &w.cfg.lora, &w.cfg.train, &mut |_| ()) {
            Ok(r) => stage_one &= before == bytes(&backbone_checkpoint(&r.model.backbone)),
            Err(e) => return Verdict::new(false, format!("stage one failed: {e}"), t),
        }
    }
    let merged = build_merged_model(&w.sources, &w.experts).unwrap();
    let before = bytes(&merged_frozen_checkpoint(&merged));
    let stage_two = match train_gate(merged, &w.target().train, &w.cfg.train, &mut |_| ()) {
        Ok(r) => before == bytes(&merged_frozen_checkpoint(&r.model)),
        Err(e) => return Verdict::new(false, format!("stage two failed: {e}"), t),
    };
    Verdict::new(
        stage_one && stage_two,
        format!("stage one backbone bytes unchanged: {stage_one}; stage two backbone and adapter bytes unchanged: {stage_two}"),
        t,
    )
}

/// `Σ r (n + m)` over every adapted weight, by enumeration of the layout.
pub fn enumerated_adapter_params(config: &BackboneConfig, rank: usize) -> usize {
    let mut total = 0;
    for _ in 0..config.layers {
        for slot in Slot::ALL {
            let (n, m) = config.slot_dims(slot);
            total += rank * (n + m);
        }
    }
    total
}

pub fn widened(dim: usize) -> BackboneConfig {
    BackboneConfig {
        dim,
        hidden: 4 * dim,
        ..BackboneConfig::default()
    }
}

pub fn parameter_cost() -> Verdict {
    let t = Instant::now();
    let config = BackboneConfig::default();
    let gate_counts: Vec<usize> = (3..=10).map(|s| gate_param_cost(&config, s).gate_params).collect();
    let actual_gate = GateParams::new(&config).param_count();
    let gate_flat = gate_counts.iter().all(|&c| c == actual_gate);
    let lora = LoraConfig::default();
    let mut adapters_match = true;
    let mut ratios = Vec::new();
    for dim in [16, 32, 64, 128] {
        let cfg = widened(dim);
        let backbone = BackboneParams::init(cfg, 0).unwrap();
        let experts: Vec<ExpertAdapterSet> = (0..3).map(|i| ExpertAdapterSet::init(&cfg, &lora, i, i as u64).unwrap()).collect();
        let report = param_count_report(&backbone, &experts);
        adapters_match &= report.per_expert_params.iter().all(|&n| n == enumerated_adapter_params(&cfg, lora.rank));
        ratios.push(report.ratio);
    }
    let shrinking = ratios.windows(2).all(|w| w[1] < w[0]);
    let mole = gate_param_cost(&config, 3).mole_reference_params;
    let ratio_text: Vec<String> = ratios.iter().map(|r| format!("{r:.4}")).collect();
    Verdict::new(
        gate_flat && adapters_match && shrinking,
        format!(
            "gate params {actual_gate} for s = 3..10 (per-token router reference at s = 3: {mole}); adapter counts match enumeration: {adapters_match}; adapter/backbone ratio at d = 16, 32, 64, 128: [{}]",
            ratio_text.join(", ")
        ),
        t,
    )
}

pub const TREND_SEEDS: u64 = 5;
pub const TREND_REQUIRED: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrendCounts {
    pub averaged_beats_blend: usize,
    pub gate_at_least_uniform: usize,
    pub every_expert_improves: usize,
}

pub fn count_trends(outcomes: &[TrendOutcome]) -> TrendCounts {
    TrendCounts {
        averaged_beats_blend: outcomes.iter().filter(|o| o.averaged > o.blended).count(),
        gate_at_least_uniform: outcomes.iter().filter(|o| o.gated >= o.lora_avg).count(),
        every_expert_improves: outcomes
            .iter()
            .filter(|o| o.adapted.iter().zip(&o.source_only).all(|(a, s)| a > s))
            .count(),
    }
}

pub fn directional_trend(cfg: &ScenarioConfig) -> (Verdict, Vec<TrendOutcome>) {
    let t = Instant::now();
    let outcomes: Vec<TrendOutcome> = match (0..TREND_SEEDS).map(|seed| run_trend(cfg, seed)).collect() {
        Ok(o) => o,
        Err(e) => return (Verdict::new(false, format!("trend run failed: {e}"), t), Vec::new()),
    };
    let c = count_trends(&outcomes);
    let pass = c.averaged_beats_blend >= TREND_REQUIRED
        && c.gate_at_least_uniform >= TREND_REQUIRED
        && c.every_expert_improves >= TREND_REQUIRED;
    let verdict = Verdict::new(
        pass,
        format!(
            "averaged > blended {}/{TREND_SEEDS}; gated >= uniform {}/{TREND_SEEDS}; every expert improved {}/{TREND_SEEDS}",
            c.averaged_beats_blend, c.gate_at_least_uniform, c.every_expert_improves
        ),
        t,
    )
    .within(Duration::from_secs(600));
    (verdict, outcomes)
}
