//! Eval-mode feature extraction and retrieval evaluation.

use rayon::prelude::*;

use super::{ExpertModel, MergedModel, SourceModel};
use crate::data::{Sample, SyntheticDataset};
use crate::error::{Error, Result};
use crate::eval::{cmc_map, retrieval_distance, RetrievalMetrics, DEFAULT_RANKS};
use crate::gating::{GateParams, GatedHook};
use crate::lora::{ExpertAdapterSet, LoraHook};
use crate::model::{forward_backbone, BackboneConfig, BackboneParams, Plain};
use crate::tape::Tape;
use crate::tensor::{l2_normalize, Tensor, NORM_EPS};

/// A frozen feature extractor. Produces the pre-head class-token feature.
#[derive(Clone, Copy)]
pub enum Encoder<'a> {
    Plain(&'a BackboneParams),
    Adapted(&'a BackboneParams, &'a ExpertAdapterSet),
    Gated {
        backbone: &'a BackboneParams,
        /// `deltas[layer][expert]`.
        deltas: &'a [Vec<Tensor>],
        gates: &'a GateParams,
    },
}

impl<'a> Encoder<'a> {
    pub fn source(model: &'a SourceModel) -> Self {
        Encoder::Plain(&model.backbone)
    }

    pub fn expert(model: &'a ExpertModel) -> Self {
        Encoder::Adapted(&model.backbone, &model.adapters)
    }

    pub fn gated(model: &'a MergedModel, deltas: &'a [Vec<Tensor>]) -> Self {
        Encoder::Gated {
            backbone: &model.backbone,
            deltas,
            gates: &model.gates,
        }
    }

    pub fn config(&self) -> BackboneConfig {
        match self {
            Encoder::Plain(b) | Encoder::Adapted(b, _) => b.config,
            Encoder::Gated { backbone, .. } => backbone.config,
        }
    }

    /// Feature of one sample plus, for gated encoders, `α` per layer.
    pub fn embed_traced(&self, tokens: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        match *self {
            Encoder::Plain(b) => {
                let bound = b.bind(&mut tape, false);
                let z = forward_backbone(&mut tape, &bound, &mut Plain, tokens)?;
                Ok((tape.value(z).data().to_vec(), Vec::new()))
            }
            Encoder::Adapted(b, set) => {
                let bound = b.bind(&mut tape, false);
                let mut hook = LoraHook::new(&mut tape, set, false, None);
                let z = forward_backbone(&mut tape, &bound, &mut hook, tokens)?;
                Ok((tape.value(z).data().to_vec(), Vec::new()))
            }
            Encoder::Gated { backbone, deltas, gates } => {
                let bound = backbone.bind(&mut tape, false);
                let gate_vars = gates.bind(&mut tape, false);
                let mut hook = GatedHook::new(&mut tape, deltas, gate_vars)?;
                let z = forward_backbone(&mut tape, &bound, &mut hook, tokens)?;
                Ok((tape.value(z).data().to_vec(), hook.last_alpha))
            }
        }
    }

    pub fn embed(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        Ok(self.embed_traced(tokens)?.0)
    }

    /// `n × d` raw features, rows in sample order.
    pub fn embed_all(&self, samples: &[Sample]) -> Result<Tensor> {
        if samples.is_empty() {
            return Err(Error::Data("no samples to encode".into()));
        }
        let rows = samples
            .par_iter()
            .map(|s| self.embed(&s.tokens))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::stack_rows(&rows)?;
        if !t.is_finite() {
            return Err(Error::Numeric {
                step: 0,
                msg: "non-finite feature during extraction".into(),
            });
        }
        Ok(t)
    }
}

/// Row-wise `l2` normalization; retrieval and clustering operate on these.
pub fn normalized_features(raw: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..raw.rows()).map(|r| l2_normalize(raw.row(r), NORM_EPS)).collect();
    Tensor::stack_rows(&rows).expect("rows share a width")
}

/// Query-vs-gallery retrieval on the held-out identities of `dataset`.
pub fn evaluate(encoder: &Encoder<'_>, dataset: &SyntheticDataset) -> Result<RetrievalMetrics> {
    if dataset.query.is_empty() || dataset.gallery.is_empty() {
        return Err(Error::Data(format!("domain {} has no query/gallery split", dataset.domain)));
    }
    let q = normalized_features(&encoder.embed_all(&dataset.query)?);
    let g = normalized_features(&encoder.embed_all(&dataset.gallery)?);
    let dist = retrieval_distance(&q, &g)?;
    let ids = |s: &[Sample]| s.iter().map(|x| x.identity).collect::<Vec<_>>();
    let cams = |s: &[Sample]| s.iter().map(|x| x.camera).collect::<Vec<_>>();
    cmc_map(
        &dist,
        &ids(&dataset.query),
        &ids(&dataset.gallery),
        &cams(&dataset.query),
        &cams(&dataset.gallery),
        &DEFAULT_RANKS,
    )
}
