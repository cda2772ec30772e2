//! Training loop for IGM and the baselines (ERM, IRM, V-REx, manifold
//! mixup) over a shared backbone.
//!
//! IGM epoch: extract every training graph (train mode), rebuild the
//! environment set, then take minibatch steps on `L_E + delta * L_I`.
//! Edge weights reaching the backbone are straight-through samples `m` of
//! the extractor's relaxed mask, so the extractor is trained end to end:
//! - environment 0 is the original graphs, unweighted;
//! - augmented environments overlay the mixed graph on the whole invariant
//!   donor: every donor edge is weighted by `m`, the environment donor's
//!   edges and cross edges are constants, and the readout covers the
//!   invariant nodes plus the environment nodes. With hard weights the
//!   forward value is the mixed graph's embedding, and every donor edge
//!   receives gradient, not only the ones already selected;
//! - invariant mixup embeds each original graph with every edge weighted
//!   by `m`, reading out only the invariant subgraph's nodes. The forward
//!   value is the embedding of the invariant subgraph, while unselected
//!   edges next to it still receive gradient.

use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::backbone::{one_hot, ArchConfig, GraphBatch};
use crate::comixup::{
    build_environments, mix_embeddings_on_tape, mixed_targets, pair_for_invariant_mix,
    sample_lambda, EdgeOrigin, EnvironmentSet, Mix,
};
use crate::error::{IgmError, Result};
use crate::evaluate;
use crate::extractor::{
    induced_node_count, node_budget, relaxed_on_tape, Extraction, ExtractorConfig, Mode,
};
use crate::graph::{Dataset, Graph};
use crate::model::{Checkpoint, Model};
use crate::objectives::environment_loss_on_tape;
use crate::params::{Adam, Bound};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Igm,
    Erm,
    Irm,
    Vrex,
    ManifoldMixup,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Igm => "igm",
            Method::Erm => "erm",
            Method::Irm => "irm",
            Method::Vrex => "vrex",
            Method::ManifoldMixup => "manifold_mixup",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = IgmError;

    fn from_str(s: &str) -> Result<Method> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| IgmError::Config(format!("unknown method `{s}`")))
    }
}

/// Every knob of a run. Unknown keys are rejected when deserializing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// IRM penalty weight.
    pub gamma: f64,
    /// V-REx penalty weight.
    pub mu: f64,
    /// Invariant-mixup loss weight.
    pub delta: f64,
    /// Beta(alpha, alpha) parameter for mixup coefficients.
    pub alpha: f64,
    /// Number of augmented environments.
    pub k: usize,
    /// Node ratio cap of the invariant subgraph.
    pub r: f64,
    /// Cross-edge insertion ratio for environment mixup.
    pub r_add: f64,
    /// Gumbel (binary concrete) temperature.
    pub tau: f64,
    pub hidden: usize,
    pub layers: usize,
    pub cls_hidden: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    /// Random training partitions used by the IRM and V-REx baselines.
    pub baseline_envs: usize,
    /// Build environments once (epoch 0) instead of every epoch.
    pub freeze_environments: bool,
    pub train_path: Option<String>,
    pub val_path: Option<String>,
    pub test_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Igm,
            seed: 0,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            gamma: 1.0,
            mu: 1.0,
            delta: 1.0,
            alpha: 1.0,
            k: 2,
            r: 0.5,
            r_add: 0.1,
            tau: 1.0,
            hidden: 64,
            layers: 3,
            cls_hidden: 64,
            enc_hidden: 64,
            enc_layers: 3,
            baseline_envs: 2,
            freeze_environments: false,
            train_path: None,
            val_path: None,
            test_path: None,
        }
    }
}

impl RunConfig {
    pub fn for_method(method: Method) -> RunConfig {
        RunConfig {
            method,
            ..RunConfig::default()
        }
    }

    pub fn arch(&self, feature_dim: usize, num_classes: usize) -> ArchConfig {
        ArchConfig {
            feature_dim,
            hidden: self.hidden,
            layers: self.layers,
            cls_hidden: self.cls_hidden,
            num_classes,
        }
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            ratio_cap: self.r,
            temperature: self.tau,
            hard_eval: true,
        }
    }

    /// Short content hash of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// Hash of the configuration with the seed reset, shared by all seeds
    /// of one setting.
    pub fn family_hash(&self) -> String {
        RunConfig {
            seed: 0,
            ..self.clone()
        }
        .hash()
    }

    /// Parses a JSON config, rejecting unknown keys.
    pub fn from_json(s: &str) -> Result<RunConfig> {
        serde_json::from_str(s).map_err(|e| IgmError::Config(e.to_string()))
    }

    /// Applies `key=value` overrides. Values parse as JSON when possible
    /// and as plain strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| IgmError::Config(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            if !obj.contains_key(key) {
                return Err(IgmError::Config(format!("unknown config key `{key}`")));
            }
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(key.to_string(), parsed);
        }
        serde_json::from_value(value).map_err(|e| IgmError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("hidden", self.hidden as f64),
            ("layers", self.layers as f64),
            ("cls_hidden", self.cls_hidden as f64),
            ("alpha", self.alpha),
            ("r_add", self.r_add),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(IgmError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("mu", self.mu), ("delta", self.delta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(IgmError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.method == Method::Igm {
            self.extractor_config().validate()?;
            if self.enc_hidden == 0 || self.enc_layers == 0 {
                return Err(IgmError::Config("extractor needs enc_hidden, enc_layers > 0".into()));
            }
        }
        if matches!(self.method, Method::Irm | Method::Vrex) && self.baseline_envs == 0 {
            return Err(IgmError::Config("baseline_envs must be positive".into()));
        }
        Ok(())
    }

    /// Fields set away from their defaults that the method ignores.
    pub fn inapplicable_fields(&self) -> Vec<&'static str> {
        let d = RunConfig::default();
        let mut out = Vec::new();
        let igm_only = [
            ("k", self.k != d.k),
            ("r", self.r != d.r),
            ("r_add", self.r_add != d.r_add),
            ("tau", self.tau != d.tau),
            ("delta", self.delta != d.delta),
            ("enc_hidden", self.enc_hidden != d.enc_hidden),
            ("enc_layers", self.enc_layers != d.enc_layers),
            ("freeze_environments", self.freeze_environments != d.freeze_environments),
        ];
        let uses_gamma = matches!(self.method, Method::Igm | Method::Irm);
        let uses_mu = matches!(self.method, Method::Igm | Method::Vrex);
        let uses_alpha = matches!(self.method, Method::Igm | Method::ManifoldMixup);
        if self.method != Method::Igm {
            out.extend(igm_only.iter().filter(|(_, set)| *set).map(|(n, _)| *n));
        }
        if !uses_gamma && self.gamma != d.gamma {
            out.push("gamma");
        }
        if !uses_mu && self.mu != d.mu {
            out.push("mu");
        }
        if !uses_alpha && self.alpha != d.alpha {
            out.push("alpha");
        }
        if !matches!(self.method, Method::Irm | Method::Vrex) && self.baseline_envs != d.baseline_envs {
            out.push("baseline_envs");
        }
        out
    }
}

/// One record per optimization step. Terms a method does not compute are
/// omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub step: usize,
    /// Per-environment cross-entropy risks (a single entry for ERM and
    /// manifold mixup).
    pub risks: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irm: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vrex: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inv_loss: Option<f64>,
    pub total: f64,
    /// Set on the last step of each epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    /// Invariant subgraphs checked against the ratio cap.
    pub cap_checks: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub val_acc: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Best-validation checkpoint.
    pub best: Checkpoint,
    /// Parameters before the first update.
    pub initial: Checkpoint,
    pub history: Vec<HistoryRecord>,
    pub stats: TrainStats,
}

/// Callbacks during training.
pub trait TrainObserver {
    fn environments(&mut self, _epoch: usize, _envs: &EnvironmentSet) -> Result<()> {
        Ok(())
    }
}

struct NoObserver;
impl TrainObserver for NoObserver {}

/// How extractor samples enter the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeWeighting {
    /// Hard forward values, relaxed gradients.
    StraightThrough,
    /// Relaxed values both ways (fully differentiable; used for checks).
    Relaxed,
}

/// Inputs of one IGM minibatch.
#[derive(Debug, Clone)]
pub struct IgmBatch<'a> {
    pub graphs: &'a [Graph],
    pub extractions: &'a [Extraction],
    pub envs: &'a EnvironmentSet,
    pub indices: &'a [usize],
    pub perm: Vec<usize>,
    pub lambdas: Vec<f64>,
}

/// Loss terms of one step recorded on a tape.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub risks: Vec<Var>,
    pub irm: Option<Vec<Var>>,
    pub vrex: Option<Var>,
    pub env_loss: Option<Var>,
    pub inv_loss: Option<Var>,
}

impl LossVars {
    fn record(&self, tape: &Tape, epoch: usize, step: usize) -> HistoryRecord {
        let s = |v: Var| tape.scalar_value(v);
        HistoryRecord {
            epoch,
            step,
            risks: self.risks.iter().map(|&v| s(v)).collect(),
            irm: self.irm.as_ref().map(|xs| xs.iter().map(|&v| s(v)).collect()),
            vrex: self.vrex.map(s),
            env_loss: self.env_loss.map(s),
            inv_loss: self.inv_loss.map(s),
            total: s(self.total),
            val_acc: None,
        }
    }
}

/// A mixed graph laid over its whole invariant donor.
struct Overlay {
    graph: Graph,
    /// Donor edge index of each edge; `None` for environment and cross edges.
    donor_edge: Vec<Option<usize>>,
    /// Nodes read out: the invariant nodes and every environment node.
    keep: Vec<usize>,
}

/// Rebuilds `mix` on top of all of `g`: nodes `0..n` are `g`'s nodes and the
/// environment part follows. Invariant edges of the mix are `g`'s own edges,
/// so every edge of `g` appears once.
fn overlay_mix(g: &Graph, inv_nodes: &[usize], mix: &Mix) -> Result<Overlay> {
    let n = g.num_nodes();
    let ni = inv_nodes.len();
    let ne = mix.graph.num_nodes() - ni;
    let mut tagged: Vec<((usize, usize), Option<usize>)> =
        g.edges().iter().enumerate().map(|(e, &uv)| (uv, Some(e))).collect();
    for (&(u, v), origin) in mix.graph.edges().iter().zip(&mix.origin) {
        match origin {
            EdgeOrigin::Invariant(_) => {}
            EdgeOrigin::Environment(_) => tagged.push(((u - ni + n, v - ni + n), None)),
            EdgeOrigin::Cross => tagged.push(((inv_nodes[u], v - ni + n), None)),
        }
    }
    tagged.sort_unstable_by_key(|t| t.0);
    let edges: Vec<(usize, usize)> = tagged.iter().map(|t| t.0).collect();
    let features = ndarray::concatenate(
        ndarray::Axis(0),
        &[g.features().view(), mix.graph.features().slice(ndarray::s![ni.., ..])],
    )
    .map_err(|_| IgmError::DimensionMismatch {
        expected: g.feature_dim(),
        actual: mix.graph.feature_dim(),
        context: "overlay features",
    })?;
    let graph = Graph::from_parts(n + ne, &edges, features, 0, 1, None)?;
    let keep = inv_nodes.iter().copied().chain(n..n + ne).collect();
    Ok(Overlay {
        graph,
        donor_edge: tagged.into_iter().map(|t| t.1).collect(),
        keep,
    })
}

fn column(values: impl IntoIterator<Item = f64>) -> Array2<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column")
}

impl Model {
    /// `L = L_E + delta * L_I` for one IGM minibatch.
    pub fn igm_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cfg: &RunConfig,
        batch: &IgmBatch<'_>,
        weighting: EdgeWeighting,
    ) -> Result<LossVars> {
        let extractor = self
            .extractor
            .as_ref()
            .ok_or_else(|| IgmError::Config("igm loss needs an extractor".into()))?;
        let idx = batch.indices;
        let labels: Vec<usize> = idx.iter().map(|&i| batch.graphs[i].label()).collect();
        let targets = one_hot(&labels, self.arch.num_classes);

        // extractor over the original graphs
        let full = GraphBatch::new(idx.iter().map(|&i| &batch.graphs[i]));
        let total_edges = full.num_edges();
        let probs = extractor.edge_probabilities(tape, bound, &full)?;
        let mut noise = Vec::with_capacity(total_edges);
        let mut hard = Vec::with_capacity(total_edges);
        for &i in idx {
            let s = &batch.extractions[i].sample;
            noise.extend_from_slice(
                s.noise
                    .as_deref()
                    .ok_or_else(|| IgmError::Config("igm loss needs train-mode extractions".into()))?,
            );
            hard.extend(s.hard.iter().map(|&h| if h { 1.0 } else { 0.0 }));
        }
        let relaxed = relaxed_on_tape(tape, probs, &noise, cfg.tau);
        let m = match weighting {
            EdgeWeighting::StraightThrough => tape.straight_through(relaxed, column(hard)),
            EdgeWeighting::Relaxed => relaxed,
        };
        // rows: [m (E), 1]
        let one = tape.scalar(1.0);
        let weights = tape.concat(&[m, one]);
        let const_row = total_edges;

        let mut env_logits = Vec::with_capacity(batch.envs.num_envs());
        for (k, env) in batch.envs.environments.iter().enumerate() {
            let psi = if k == 0 {
                self.backbone.embed(tape, bound, &full, None)?
            } else {
                let mut rows = Vec::new();
                let mut graphs = Vec::with_capacity(idx.len());
                let mut keeps = Vec::with_capacity(idx.len());
                for (b, &i) in idx.iter().enumerate() {
                    debug_assert_eq!(env[i].inv_donor, i);
                    let o = overlay_mix(&batch.graphs[i], &batch.extractions[i].split.invariant.nodes, &env[i].mix)?;
                    let off = full.edge_offsets[b];
                    rows.extend(o.donor_edge.iter().map(|d| d.map_or(const_row, |e| off + e)));
                    graphs.push(o.graph);
                    keeps.push(o.keep);
                }
                let mixed = GraphBatch::new(&graphs);
                let w = tape.gather(weights, Rc::from(rows));
                let keep: Vec<&[usize]> = keeps.iter().map(Vec::as_slice).collect();
                self.backbone.embed_restricted(tape, bound, &mixed, Some(w), &keep)?
            };
            let z = self.backbone.logits(tape, bound, psi);
            env_logits.push((z, targets.clone()));
        }
        let terms = environment_loss_on_tape(tape, &env_logits, cfg.gamma, cfg.mu);

        let inv_loss = if cfg.delta > 0.0 {
            let keep: Vec<&[usize]> = idx
                .iter()
                .map(|&i| batch.extractions[i].split.invariant.nodes.as_slice())
                .collect();
            let psi = self.backbone.embed_restricted(tape, bound, &full, Some(m), &keep)?;
            let mixed = mix_embeddings_on_tape(tape, psi, &batch.perm, &batch.lambdas);
            let z = self.backbone.logits(tape, bound, mixed);
            let t = mixed_targets(&labels, &batch.perm, &batch.lambdas, self.arch.num_classes);
            Some(tape.cross_entropy(z, t))
        } else {
            None
        };
        let total = match inv_loss {
            Some(li) => {
                let weighted = tape.scale(li, cfg.delta);
                tape.add(terms.loss, weighted)
            }
            None => terms.loss,
        };
        Ok(LossVars {
            total,
            risks: terms.risks,
            irm: Some(terms.irm),
            vrex: Some(terms.vrex),
            env_loss: Some(terms.loss),
            inv_loss,
        })
    }

    /// Loss value and parameter gradients for one IGM minibatch.
    pub fn igm_loss_and_grad(
        &self,
        cfg: &RunConfig,
        batch: &IgmBatch<'_>,
        weighting: EdgeWeighting,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = self.igm_loss(&mut tape, &bound, cfg, batch, weighting)?;
        let mut grads = tape.backward(vars.total);
        Ok((tape.scalar_value(vars.total), self.params.gradients(&bound, &mut grads)))
    }

    /// Loss for the baseline methods on whole graphs.
    #[allow(clippy::too_many_arguments)]
    fn baseline_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cfg: &RunConfig,
        graphs: &[Graph],
        indices: &[usize],
        env_of: &[usize],
        mix: Option<(&[usize], &[f64])>,
    ) -> Result<LossVars> {
        let c = self.arch.num_classes;
        let labels: Vec<usize> = indices.iter().map(|&i| graphs[i].label()).collect();
        let batch = GraphBatch::new(indices.iter().map(|&i| &graphs[i]));
        let psi = self.backbone.embed(tape, bound, &batch, None)?;
        match cfg.method {
            Method::Erm => {
                let z = self.backbone.logits(tape, bound, psi);
                let r = tape.cross_entropy(z, one_hot(&labels, c));
                Ok(LossVars {
                    total: r,
                    risks: vec![r],
                    irm: None,
                    vrex: None,
                    env_loss: None,
                    inv_loss: None,
                })
            }
            Method::ManifoldMixup => {
                let (perm, lambdas) = mix.ok_or_else(|| IgmError::Config("mixup draws missing".into()))?;
                let mixed = mix_embeddings_on_tape(tape, psi, perm, lambdas);
                let z = self.backbone.logits(tape, bound, mixed);
                let r = tape.cross_entropy(z, mixed_targets(&labels, perm, lambdas, c));
                Ok(LossVars {
                    total: r,
                    risks: vec![r],
                    irm: None,
                    vrex: None,
                    env_loss: None,
                    inv_loss: None,
                })
            }
            Method::Irm | Method::Vrex => {
                let z = self.backbone.logits(tape, bound, psi);
                let mut per_env = Vec::new();
                for e in 0..cfg.baseline_envs {
                    let rows: Vec<usize> = (0..indices.len()).filter(|&b| env_of[indices[b]] == e).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let ze = tape.gather(z, Rc::from(rows.as_slice()));
                    let ye: Vec<usize> = rows.iter().map(|&b| labels[b]).collect();
                    per_env.push((ze, one_hot(&ye, c)));
                }
                let (gamma, mu) = if cfg.method == Method::Irm {
                    (cfg.gamma, 0.0)
                } else {
                    (0.0, cfg.mu)
                };
                let terms = environment_loss_on_tape(tape, &per_env, gamma, mu);
                Ok(LossVars {
                    total: terms.loss,
                    risks: terms.risks,
                    irm: (cfg.method == Method::Irm).then_some(terms.irm),
                    vrex: (cfg.method == Method::Vrex).then_some(terms.vrex),
                    env_loss: Some(terms.loss),
                    inv_loss: None,
                })
            }
            Method::Igm => Err(IgmError::Config("igm is not a baseline".into())),
        }
    }
}

/// Mixup pairing and coefficients for a batch of `n`.
pub fn draw_mixup(n: usize, alpha: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<f64>)> {
    let perm = pair_for_invariant_mix(n, rng);
    let lambdas = (0..n).map(|_| sample_lambda(alpha, rng)).collect::<Result<Vec<_>>>()?;
    Ok((perm, lambdas))
}

/// Checks every extraction against the node budget.
pub fn check_ratio_cap(graphs: &[Graph], extractions: &[Extraction], indices: &[usize], r: f64) -> Result<usize> {
    for &i in indices {
        let g = &graphs[i];
        let nodes = induced_node_count(g, &extractions[i].sample.hard);
        let budget = node_budget(r, g.num_nodes());
        if nodes > budget {
            return Err(IgmError::RatioCap { nodes, budget });
        }
    }
    Ok(indices.len())
}

fn check_datasets(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(IgmError::Config("training and validation sets must be non-empty".into()));
    }
    if train.feature_dim != val.feature_dim || train.num_classes != val.num_classes {
        return Err(IgmError::DimensionMismatch {
            expected: train.feature_dim,
            actual: val.feature_dim,
            context: "train vs val feature_dim",
        });
    }
    if let Some(c) = train.class_counts().iter().position(|&n| n == 0) {
        return Err(IgmError::Config(format!("class {c} absent from the training set")));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, train_ds: &Dataset, val_ds: &Dataset) -> Result<TrainOutput> {
    train_observed(cfg, train_ds, val_ds, &mut NoObserver)
}

pub fn train_observed(
    cfg: &RunConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_datasets(train_ds, val_ds)?;
    for field in cfg.inapplicable_fields() {
        log::warn!("`{field}` is ignored by method {}", cfg.method.name());
    }

    let mut model = Model::new(cfg, train_ds.feature_dim, train_ds.num_classes);
    let initial = Checkpoint::capture(&model, cfg, 0, 0);
    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    let graphs = &train_ds.graphs;
    let n = graphs.len();
    let ext_cfg = cfg.extractor_config();

    let env_of: Vec<usize> = {
        let mut r = rng::stream(cfg.seed, &[rng::STREAM_BASELINE_ENVS]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let mut env = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            env[i] = pos * cfg.baseline_envs.max(1) / n;
        }
        env
    };

    let mut history = Vec::new();
    let mut stats = TrainStats {
        best_val_acc: f64::NEG_INFINITY,
        ..TrainStats::default()
    };
    let mut best = initial.clone();
    let mut frozen: Option<(Vec<Extraction>, EnvironmentSet)> = None;

    for epoch in 0..cfg.epochs {
        let igm_state = if cfg.method == Method::Igm {
            let state = match (&frozen, cfg.freeze_environments) {
                (Some(f), true) => f.clone(),
                _ => {
                    let extractor = model.extractor.as_ref().expect("igm model has an extractor");
                    let refs: Vec<&Graph> = graphs.iter().collect();
                    let extractions = extractor.extract_many(
                        &model.params,
                        &refs,
                        &ext_cfg,
                        Mode::Train,
                        &mut rng::stream(cfg.seed, &[rng::STREAM_EXTRACT, epoch as u64]),
                    )?;
                    let splits: Vec<_> = extractions.iter().map(|e| e.split.clone()).collect();
                    let envs = build_environments(
                        graphs,
                        &splits,
                        train_ds.num_classes,
                        cfg.k,
                        cfg.r_add,
                        &mut rng::stream(cfg.seed, &[rng::STREAM_ENVIRONMENTS, epoch as u64]),
                    )?;
                    (extractions, envs)
                }
            };
            if cfg.freeze_environments && frozen.is_none() {
                frozen = Some(state.clone());
            }
            observer.environments(epoch, &state.1)?;
            Some(state)
        } else {
            None
        };

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::STREAM_SHUFFLE, epoch as u64]));
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut mix_rng = rng::stream(cfg.seed, &[rng::STREAM_MIXUP, epoch as u64, step as u64]);
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let vars = match &igm_state {
                Some((extractions, envs)) => {
                    stats.cap_checks += check_ratio_cap(graphs, extractions, chunk, cfg.r)?;
                    let (perm, lambdas) = if cfg.delta > 0.0 {
                        draw_mixup(chunk.len(), cfg.alpha, &mut mix_rng)?
                    } else {
                        (Vec::new(), Vec::new())
                    };
                    let batch = IgmBatch {
                        graphs,
                        extractions,
                        envs,
                        indices: chunk,
                        perm,
                        lambdas,
                    };
                    model.igm_loss(&mut tape, &bound, cfg, &batch, EdgeWeighting::StraightThrough)?
                }
                None => {
                    let draws = if cfg.method == Method::ManifoldMixup {
                        Some(draw_mixup(chunk.len(), cfg.alpha, &mut mix_rng)?)
                    } else {
                        None
                    };
                    let mix = draws.as_ref().map(|(p, l)| (p.as_slice(), l.as_slice()));
                    model.baseline_loss(&mut tape, &bound, cfg, graphs, chunk, &env_of, mix)?
                }
            };
            let record = vars.record(&tape, epoch, step);
            if !record.total.is_finite() {
                return Err(IgmError::Diverged {
                    epoch,
                    step,
                    detail: format!("{record:?}"),
                });
            }
            let mut grads = tape.backward(vars.total);
            let grads = model.params.gradients(&bound, &mut grads);
            opt.step(&mut model.params, &grads);
            if !model.params.all_finite() {
                return Err(IgmError::Diverged {
                    epoch,
                    step,
                    detail: "non-finite parameters after update".into(),
                });
            }
            history.push(record);
            stats.steps += 1;
        }

        let val_acc = evaluate::accuracy_on(&model, &val_ds.graphs, &ext_cfg)?;
        if let Some(last) = history.last_mut() {
            last.val_acc = Some(val_acc);
        }
        stats.val_acc.push(val_acc);
        log::info!(
            "[{}] epoch {epoch}: loss {:.4}, val acc {val_acc:.4}",
            cfg.method.name(),
            history.last().map_or(f64::NAN, |r| r.total)
        );
        if val_acc > stats.best_val_acc {
            stats.best_val_acc = val_acc;
            stats.best_epoch = epoch;
            best = Checkpoint::capture(&model, cfg, epoch, stats.steps);
        }
    }

    Ok(TrainOutput {
        best,
        initial,
        history,
        stats,
    })
}
