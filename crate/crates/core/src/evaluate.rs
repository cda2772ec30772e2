//! Test-time prediction and metrics.
//!
//! IGM predicts from the extracted invariant subgraph alone (eval-mode
//! masks); the baselines predict from the full graph.

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape};
use crate::backbone::GraphBatch;
use crate::error::{IgmError, Result};
use crate::extractor::{Extraction, ExtractorConfig, Mode};
use crate::graph::{Dataset, Graph};
use crate::metrics::{self, kmeans, nmi, Recovery, RecoveryCounts};
use crate::model::Model;
use crate::rng::{self, Rng};

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc: f64,
    pub mcc: f64,
    /// Edge-level agreement with ground-truth masks (IGM only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery: Option<Recovery>,
    /// Clustering of environment-subgraph embeddings against base classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub probs: Array2<f64>,
    /// Eval-mode extractions, when the model has an extractor.
    pub extractions: Option<Vec<Extraction>>,
}

/// Eval-mode extraction of every graph.
pub fn extract_eval(model: &Model, graphs: &[Graph], cfg: &ExtractorConfig) -> Result<Option<Vec<Extraction>>> {
    let Some(extractor) = &model.extractor else {
        return Ok(None);
    };
    let refs: Vec<&Graph> = graphs.iter().collect();
    // eval mode draws nothing, the stream only satisfies the signature
    let mut r = rng::stream(0, &[rng::STREAM_EVAL]);
    extractor
        .extract_many(&model.params, &refs, cfg, Mode::Eval, &mut r)
        .map(Some)
}

fn predict_graphs<'a>(model: &Model, graphs: impl ExactSizeIterator<Item = &'a Graph>) -> Result<Array2<f64>> {
    let graphs: Vec<&Graph> = graphs.collect();
    let mut out = Array2::zeros((graphs.len(), model.arch.num_classes));
    for (c, chunk) in graphs.chunks(CHUNK).enumerate() {
        let probs = model.backbone.predict(&model.params, &GraphBatch::new(chunk.iter().copied()))?;
        out.slice_mut(ndarray::s![c * CHUNK..c * CHUNK + chunk.len(), ..])
            .assign(&probs);
    }
    Ok(out)
}

/// Class probabilities from each graph's invariant subgraph: the full
/// graph with the hard mask as edge weights, read out over the invariant
/// nodes. Matches the view used by the training loss.
fn predict_invariant(model: &Model, graphs: &[Graph], extractions: &[Extraction]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((graphs.len(), model.arch.num_classes));
    for (c, (gs, ex)) in graphs.chunks(CHUNK).zip(extractions.chunks(CHUNK)).enumerate() {
        let batch = GraphBatch::new(gs);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mask: Vec<f64> = ex
            .iter()
            .flat_map(|e| e.sample.hard.iter().map(|&h| if h { 1.0 } else { 0.0 }))
            .collect();
        let n = mask.len();
        let w = tape.constant(Array2::from_shape_vec((n, 1), mask).expect("column"));
        let keep: Vec<&[usize]> = ex.iter().map(|e| e.split.invariant.nodes.as_slice()).collect();
        let psi = model.backbone.embed_restricted(&mut tape, &bound, &batch, Some(w), &keep)?;
        let z = model.backbone.logits(&mut tape, &bound, psi);
        out.slice_mut(ndarray::s![c * CHUNK..c * CHUNK + gs.len(), ..])
            .assign(&softmax(tape.value(z)));
    }
    Ok(out)
}

/// Class probabilities for every graph.
pub fn predict(
    model: &Model,
    graphs: &[Graph],
    cfg: &ExtractorConfig,
) -> Result<(Array2<f64>, Option<Vec<Extraction>>)> {
    let extractions = extract_eval(model, graphs, cfg)?;
    let probs = match &extractions {
        Some(ex) => predict_invariant(model, graphs, ex)?,
        None => predict_graphs(model, graphs.iter())?,
    };
    Ok((probs, extractions))
}

pub fn accuracy_on(model: &Model, graphs: &[Graph], cfg: &ExtractorConfig) -> Result<f64> {
    let (probs, _) = predict(model, graphs, cfg)?;
    let labels: Vec<usize> = graphs.iter().map(Graph::label).collect();
    Ok(metrics::accuracy(&metrics::predictions(&probs), &labels))
}

/// Backbone embeddings of the given graphs, one row each.
pub fn embeddings<'a>(model: &Model, graphs: impl IntoIterator<Item = &'a Graph>) -> Result<Array2<f64>> {
    let graphs: Vec<&Graph> = graphs.into_iter().collect();
    let mut rows = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(CHUNK) {
        let batch = GraphBatch::new(chunk.iter().copied());
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let psi = model.backbone.embed(&mut tape, &bound, &batch, None)?;
        rows.push(tape.value(psi).clone());
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    if views.is_empty() {
        return Ok(Array2::zeros((0, model.arch.hidden)));
    }
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths"))
}

/// Edge-level recovery of ground-truth masks. Graphs without a mask are
/// skipped; `None` when no graph carries one.
pub fn subgraph_recovery(graphs: &[Graph], masks: &[Vec<bool>]) -> Option<Recovery> {
    let mut counts = RecoveryCounts::default();
    let mut any = false;
    for (g, m) in graphs.iter().zip(masks) {
        if let Some(gt) = g.gt_mask() {
            counts.add(m, gt);
            any = true;
        }
    }
    any.then(|| counts.scores())
}

/// Recovery of uniformly random masks with the same number of selected
/// edges per graph as `masks`.
pub fn random_mask_recovery(graphs: &[Graph], masks: &[Vec<bool>], rng: &mut Rng) -> Option<Recovery> {
    let random: Vec<Vec<bool>> = graphs
        .iter()
        .zip(masks)
        .map(|(g, m)| {
            let k = m.iter().filter(|&&b| b).count();
            let mut out = vec![false; g.num_edges()];
            for e in sample(rng, g.num_edges(), k) {
                out[e] = true;
            }
            out
        })
        .collect();
    subgraph_recovery(graphs, &random)
}

/// Clusters environment-subgraph embeddings into as many groups as there
/// are base classes and scores the clustering against them.
pub fn environment_nmi(model: &Model, graphs: &[Graph], extractions: &[Extraction], seed: u64) -> Result<Option<f64>> {
    let bases: Option<Vec<usize>> = graphs.iter().map(Graph::base_class).collect();
    let Some(bases) = bases else {
        return Ok(None);
    };
    if graphs.is_empty() {
        return Ok(None);
    }
    if extractions.len() != graphs.len() {
        return Err(IgmError::MaskLength {
            expected: graphs.len(),
            actual: extractions.len(),
        });
    }
    let k = {
        let mut distinct = bases.clone();
        distinct.sort_unstable();
        distinct.dedup();
        distinct.len()
    };
    let emb = embeddings(model, extractions.iter().map(|e| &e.split.environment.graph))?;
    let clusters = kmeans(&emb, k, 10, &mut rng::stream(seed, &[rng::STREAM_EVAL]));
    Ok(Some(nmi(&clusters, &bases)))
}

pub fn evaluate(model: &Model, ds: &Dataset, cfg: &ExtractorConfig, seed: u64) -> Result<Evaluation> {
    if ds.feature_dim != model.arch.feature_dim {
        return Err(IgmError::DimensionMismatch {
            expected: model.arch.feature_dim,
            actual: ds.feature_dim,
            context: "dataset feature_dim vs model",
        });
    }
    let (probs, extractions) = predict(model, &ds.graphs, cfg)?;
    let labels = ds.labels();
    let pred = metrics::predictions(&probs);
    let (recovery, env_nmi) = match &extractions {
        Some(ex) => {
            let masks: Vec<Vec<bool>> = ex.iter().map(|e| e.sample.hard.clone()).collect();
            (
                subgraph_recovery(&ds.graphs, &masks),
                environment_nmi(model, &ds.graphs, ex, seed)?,
            )
        }
        None => (None, None),
    };
    Ok(Evaluation {
        metrics: Metrics {
            accuracy: metrics::accuracy(&pred, &labels),
            auc: metrics::roc_auc(&probs, &labels),
            mcc: metrics::mcc(&pred, &labels, ds.num_classes),
            recovery,
            nmi: env_nmi,
        },
        probs,
        extractions,
    })
}
