//! One function per subcommand. Artifacts live in two directories:
//! `data/domain{i}.sage` (sources first, target last) with `manifest.toml`,
//! and `models/{source,expert}{i}.sage`, `models/merged.sage`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sage_core::data::{read_checkpoint, write_checkpoint, Split, SyntheticDataset};
use sage_core::gating::{deltas_by_layer, gate_param_cost};
use sage_core::lora::param_count_report;
use sage_core::pipeline::artifacts::{expert_checkpoint, merged_checkpoint, source_checkpoint, AnyModel};
use sage_core::pipeline::scenario::ScenarioConfig;
use sage_core::pipeline::{
    adapt_expert, build_merged_model, evaluate, pretrain_source, train_gate, Encoder, EpochStats, ExpertModel,
    MergedModel, SourceModel,
};
use sage_core::Error;

use crate::config::RunConfig;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Missing(PathBuf),
    Core(Error),
    Other(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Core(Error::Config(_)) => 2,
            Failure::Missing(_) => 3,
            Failure::Core(Error::Numeric { .. }) => 4,
            Failure::Core(_) | Failure::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "invalid configuration: {m}"),
            Failure::Missing(p) => write!(f, "missing prerequisite file {}", p.display()),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Missing(path.to_path_buf()))
    }
}

fn progress_line(stage: &str, e: &EpochStats) -> String {
    format!("{stage} {e}")
}

pub struct Context {
    cfg: RunConfig,
    scenario: ScenarioConfig,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self, Failure> {
        let scenario = cfg.validate().map_err(Failure::Config)?;
        Ok(Self { cfg, scenario })
    }

    fn sources(&self) -> usize {
        self.scenario.sources.len()
    }

    fn domain_path(&self, domain: usize) -> PathBuf {
        self.cfg.paths.data.join(format!("domain{domain}.sage"))
    }

    fn model_path(&self, name: &str) -> PathBuf {
        self.cfg.paths.models.join(format!("{name}.sage"))
    }

    fn check_source(&self, source: usize) -> Result<(), Failure> {
        if source >= self.sources() {
            return Err(Failure::Config(format!(
                "source {source} out of range; the configuration has {} sources",
                self.sources()
            )));
        }
        Ok(())
    }

    fn load_domain(&self, domain: usize) -> Result<SyntheticDataset, Failure> {
        let path = self.domain_path(domain);
        require(&path)?;
        let ds = SyntheticDataset::from_checkpoint(&read_checkpoint(&path)?)?;
        let b = self.scenario.backbone;
        let expected = [b.content_tokens(), b.input_dim];
        if let Some(s) = ds.train.first().or(ds.query.first()) {
            if s.tokens.shape() != expected {
                return Err(Failure::Config(format!(
                    "{} holds {:?} tokens but the backbone expects {expected:?}; regenerate the data",
                    path.display(),
                    s.tokens.shape()
                )));
            }
        }
        Ok(ds)
    }

    fn target(&self) -> Result<SyntheticDataset, Failure> {
        self.load_domain(self.sources())
    }

    fn load_model(&self, path: &Path) -> Result<AnyModel, Failure> {
        require(path)?;
        Ok(AnyModel::from_checkpoint(&read_checkpoint(path)?)?)
    }

    fn load_source(&self, source: usize) -> Result<SourceModel, Failure> {
        let path = self.model_path(&format!("source{source}"));
        match self.load_model(&path)? {
            AnyModel::Source(m) => Ok(m),
            other => Err(Failure::Other(format!("{} holds a {:?} model", path.display(), other.kind()))),
        }
    }

    fn load_expert(&self, source: usize) -> Result<ExpertModel, Failure> {
        let path = self.model_path(&format!("expert{source}"));
        match self.load_model(&path)? {
            AnyModel::Expert(m) => Ok(m),
            other => Err(Failure::Other(format!("{} holds a {:?} model", path.display(), other.kind()))),
        }
    }

    fn save(&self, name: &str, ckpt: &sage_core::data::Checkpoint) -> Result<PathBuf, Failure> {
        let dir = &self.cfg.paths.models;
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = self.model_path(name);
        write_checkpoint(&path, ckpt)?;
        Ok(path)
    }

    pub fn gen_data(&self) -> Result<(), Failure> {
        let domains = self.scenario.generate(self.cfg.seed)?;
        let dir = &self.cfg.paths.data;
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut manifest = format!("seed = {}\n", self.cfg.seed);
        for ds in &domains {
            let role = if ds.domain < self.sources() { "source" } else { "target" };
            write_checkpoint(&self.domain_path(ds.domain), &ds.to_checkpoint())?;
            println!("{}", ds.manifest_line(role));
            manifest.push_str(&format!(
                "\n[[domain]]\nindex = {}\nrole = \"{role}\"\nfile = \"domain{}.sage\"\ncameras = {}\nimages = {}\nids = {}\n",
                ds.domain,
                ds.domain,
                ds.camera_count(),
                ds.train.len() + ds.query.len() + ds.gallery.len(),
                ds.prototypes.len(),
            ));
            for split in Split::ALL {
                manifest.push_str(&format!(
                    "{0}_images = {1}\n{0}_ids = {2}\n",
                    split.name(),
                    ds.split(split).len(),
                    ds.identity_count(split)
                ));
            }
        }
        let path = dir.join("manifest.toml");
        fs::write(&path, manifest).map_err(|e| io(&path, e))?;
        Ok(())
    }

    pub fn pretrain(&self, source: usize) -> Result<(), Failure> {
        self.check_source(source)?;
        let ds = self.load_domain(source)?;
        let stage = format!("pretrain source={source}");
        let report = pretrain_source(
            &ds.train,
            source,
            self.scenario.backbone,
            &self.scenario.train,
            &mut |e| println!("{}", progress_line(&stage, e)),
        )?;
        let path = self.save(&format!("source{source}"), &source_checkpoint(&report.model))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn adapt(&self, only: Option<usize>, parallel: usize) -> Result<(), Failure> {
        let ids: Vec<usize> = match only {
            Some(s) => {
                self.check_source(s)?;
                vec![s]
            }
            None => (0..self.sources()).collect(),
        };
        if parallel == 0 {
            return Err(Failure::Config("--parallel-experts must be at least 1".into()));
        }
        let target = self.target()?;
        let models = ids.iter().map(|&s| self.load_source(s)).collect::<Result<Vec<_>, _>>()?;
        let job = |m: &SourceModel| -> Result<(ExpertModel, Vec<String>), Error> {
            let stage = format!("adapt source={}", m.source_id);
            let mut lines = Vec::new();
            let r = adapt_expert(m, &target.train, &self.scenario.lora, &self.scenario.train, &mut |e| {
                lines.push(progress_line(&stage, e))
            })?;
            Ok((r.model, lines))
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Failure::Other(e.to_string()))?;
        // Lines are buffered per expert so output order never depends on scheduling.
        let results: Vec<Result<(ExpertModel, Vec<String>), Error>> = pool.install(|| models.par_iter().map(job).collect());
        for (s, r) in ids.iter().zip(results) {
            let (expert, lines) = r?;
            for l in lines {
                println!("{l}");
            }
            let path = self.save(&format!("expert{s}"), &expert_checkpoint(&expert))?;
            log::info!("wrote {}", path.display());
        }
        Ok(())
    }

    pub fn merge_train(&self) -> Result<(), Failure> {
        let target = self.target()?;
        let mut sources = Vec::new();
        let mut experts = Vec::new();
        for s in 0..self.sources() {
            sources.push(self.load_source(s)?);
            experts.push(self.load_expert(s)?);
        }
        let merged = build_merged_model(&sources, &experts)?;
        let report = train_gate(merged, &target.train, &self.scenario.train, &mut |e| {
            println!("{}", progress_line("gate", e))
        })?;
        log::info!(
            "gate: {} coefficient checks, max |sum - 1| = {:e}",
            report.alpha_checks,
            report.max_alpha_sum_error
        );
        let path = self.save("merged", &merged_checkpoint(&report.model))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn eval(&self, model: &Path) -> Result<(), Failure> {
        let m = self.load_model(model)?;
        let target = self.target()?;
        let metrics = match &m {
            AnyModel::Source(s) => evaluate(&Encoder::source(s), &target)?,
            AnyModel::Expert(e) => evaluate(&Encoder::expert(e), &target)?,
            AnyModel::Merged(g) => {
                let deltas = deltas_by_layer(&g.experts, &g.backbone.config)?;
                evaluate(&Encoder::gated(g, &deltas), &target)?
            }
        };
        let name = model.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let line = format!("eval model={name} kind={:?} {metrics}", m.kind());
        println!("{line}");
        let out = model.with_extension("metrics");
        fs::write(&out, format!("{line}\n")).map_err(|e| io(&out, e))?;
        Ok(())
    }

    pub fn inspect(&self, model: &Path) -> Result<(), Failure> {
        let m = self.load_model(model)?;
        let (backbone, experts, head) = match &m {
            AnyModel::Source(s) => (&s.backbone, Vec::new(), &s.head),
            AnyModel::Expert(e) => (&e.backbone, vec![e.adapters.clone()], &e.head),
            AnyModel::Merged(g) => (&g.backbone, g.experts.clone(), &g.head),
        };
        let report = param_count_report(backbone, &experts);
        println!("kind={:?}", m.kind());
        println!("backbone_params={}", report.backbone_params);
        println!("head_params={}", head.classifier.numel() + 2 * head.dim());
        for (i, n) in report.per_expert_params.iter().enumerate() {
            println!("expert{i}_adapter_params={n}");
        }
        if !experts.is_empty() {
            println!("adapter_to_backbone_ratio={:.6}", report.ratio);
        }
        if let AnyModel::Merged(g) = &m {
            let config = g.backbone.config;
            let s = g.experts.len();
            println!("experts={s}");
            println!("gate_params={}", g.gates.param_count());
            for other in [1, 3, 10] {
                let cost = gate_param_cost(&config, other);
                println!(
                    "gate_params_at_s{other}={} per_token_router_reference_at_s{other}={}",
                    cost.gate_params, cost.mole_reference_params
                );
            }
            self.inspect_alphas(g)?;
        }
        Ok(())
    }

    /// Mean coefficient per layer over the target train split; needs the data.
    fn inspect_alphas(&self, g: &MergedModel) -> Result<(), Failure> {
        let target = self.target()?;
        let deltas = deltas_by_layer(&g.experts, &g.backbone.config)?;
        let enc = Encoder::gated(g, &deltas);
        let keys = g.backbone.config.layer_keys();
        let mut sums = vec![vec![0.0; g.experts.len()]; keys.len()];
        for sample in &target.train {
            let (_, alphas) = enc.embed_traced(&sample.tokens)?;
            for (acc, a) in sums.iter_mut().zip(&alphas) {
                for (x, v) in acc.iter_mut().zip(a) {
                    *x += v;
                }
            }
        }
        let n = target.train.len().max(1) as f64;
        for ((key, acc), gate) in keys.iter().zip(&sums).zip(&g.gates.layers) {
            let mean: Vec<String> = acc.iter().map(|x| format!("{:.4}", x / n)).collect();
            println!("mean_alpha layer={} tau={:.4} alpha=[{}]", key.name(), gate.tau(), mean.join(", "));
        }
        Ok(())
    }
}
