//! Message-passing feature encoder, mean readout and softmax classifier.
//!
//! Layer update: `h' = relu(h W_self + b + (sum_{u->v} w_uv h_u) W_neigh)`,
//! where `w_uv` is an optional per-edge weight in `[0, 1]`.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Messages, Tape, Var};
use crate::error::{IgmError, Result};
use crate::graph::Graph;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;

/// Several graphs packed as one disjoint union for batched message passing.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub features: Array2<f64>,
    pub messages: Rc<Messages>,
    /// Graph index of every node.
    pub segment: Rc<[usize]>,
    pub node_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
    num_graphs: usize,
}

impl GraphBatch {
    pub fn new<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> GraphBatch {
        let graphs: Vec<&Graph> = graphs.into_iter().collect();
        let feature_dim = graphs.first().map_or(0, |g| g.feature_dim());
        let total_nodes: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut features = Array2::zeros((total_nodes, feature_dim));
        let mut edges = Vec::new();
        let mut segment = Vec::with_capacity(total_nodes);
        let mut node_offsets = Vec::with_capacity(graphs.len() + 1);
        let mut edge_offsets = Vec::with_capacity(graphs.len() + 1);
        let (mut n0, mut e0) = (0, 0);
        for (gi, g) in graphs.iter().enumerate() {
            node_offsets.push(n0);
            edge_offsets.push(e0);
            features
                .slice_mut(ndarray::s![n0..n0 + g.num_nodes(), ..])
                .assign(g.features());
            edges.extend(g.edges().iter().map(|&(u, v)| (u + n0, v + n0)));
            segment.extend(std::iter::repeat_n(gi, g.num_nodes()));
            n0 += g.num_nodes();
            e0 += g.num_edges();
        }
        node_offsets.push(n0);
        edge_offsets.push(e0);
        GraphBatch {
            features,
            messages: Rc::new(Messages::undirected(&edges)),
            segment: segment.into(),
            node_offsets,
            edge_offsets,
            num_graphs: graphs.len(),
        }
    }

    pub fn num_graphs(&self) -> usize {
        self.num_graphs
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.messages.len() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Architecture hyper-parameters of the feature encoder and classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub cls_hidden: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
struct GnnLayer {
    self_w: ParamId,
    bias: ParamId,
    neigh_w: ParamId,
}

/// Stack of weighted sum-aggregation layers.
#[derive(Debug, Clone)]
pub struct Gnn {
    layers: Vec<GnnLayer>,
    in_dim: usize,
    out_dim: usize,
}

impl Gnn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut Rng,
    ) -> Gnn {
        let mut layers = Vec::with_capacity(num_layers);
        let mut d = in_dim;
        for l in 0..num_layers {
            layers.push(GnnLayer {
                self_w: store.add_uniform(format!("{prefix}.{l}.self_w"), (d, hidden), d, rng),
                bias: store.add_uniform(format!("{prefix}.{l}.bias"), (1, hidden), d, rng),
                neigh_w: store.add_uniform(format!("{prefix}.{l}.neigh_w"), (d, hidden), d, rng),
            });
            d = hidden;
        }
        Gnn {
            layers,
            in_dim,
            out_dim: d,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Node embeddings for every node of the batch. `edge_weights`, when
    /// given, is a column with one row per undirected batch edge.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        batch: &GraphBatch,
        edge_weights: Option<Var>,
    ) -> Result<Var> {
        if batch.feature_dim() != self.in_dim {
            return Err(IgmError::DimensionMismatch {
                expected: self.in_dim,
                actual: batch.feature_dim(),
                context: "batch features vs encoder input",
            });
        }
        if let Some(w) = edge_weights {
            let dim = tape.value(w).dim();
            if dim != (batch.num_edges(), 1) {
                return Err(IgmError::DimensionMismatch {
                    expected: batch.num_edges(),
                    actual: dim.0,
                    context: "edge weight rows vs batch edges",
                });
            }
        }
        let mut h = tape.constant(batch.features.clone());
        for layer in &self.layers {
            let agg = tape.propagate(h, edge_weights, batch.messages.clone());
            let own = tape.matmul(h, params.var(layer.self_w));
            let own = tape.add_bias(own, params.var(layer.bias));
            let nb = tape.matmul(agg, params.var(layer.neigh_w));
            let pre = tape.add(own, nb);
            h = tape.relu(pre);
        }
        Ok(h)
    }
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut Rng) -> Mlp {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                (
                    store.add_uniform(format!("{prefix}.{l}.w"), (w[0], w[1]), w[0], rng),
                    store.add_uniform(format!("{prefix}.{l}.b"), (1, w[1]), w[0], rng),
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let y = tape.matmul(h, params.var(w));
            h = tape.add_bias(y, params.var(b));
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Parameter ids of the final layer `(weight, bias)`.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        *self.layers.last().expect("mlp has at least one layer")
    }
}

/// Mean of node embeddings per graph.
pub fn readout(tape: &mut Tape, node_embeddings: Var, batch: &GraphBatch) -> Var {
    tape.segment_mean(node_embeddings, batch.segment.clone(), batch.num_graphs())
}

/// Row-wise class probabilities from logits.
pub fn classify(logits: &Array2<f64>) -> Array2<f64> {
    softmax(logits)
}

/// Feature encoder `GNN_fea` plus classifier head `MLP_cls`.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub encoder: Gnn,
    pub classifier: Mlp,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, arch: &ArchConfig, rng: &mut Rng) -> Backbone {
        let encoder = Gnn::new(store, "fea", arch.feature_dim, arch.hidden, arch.layers, rng);
        let classifier = Mlp::new(
            store,
            "cls",
            &[encoder.out_dim(), arch.cls_hidden, arch.num_classes],
            rng,
        );
        Backbone {
            encoder,
            classifier,
        }
    }

    /// Graph embeddings `psi`, one row per batch graph.
    pub fn embed(
        &self,
        tape: &mut Tape,
        params: &Bound,
        batch: &GraphBatch,
        edge_weights: Option<Var>,
    ) -> Result<Var> {
        let nodes = self.encoder.forward(tape, params, batch, edge_weights)?;
        Ok(readout(tape, nodes, batch))
    }

    /// Like [`Self::embed`] but each graph's readout averages only the
    /// listed local nodes (`keep[b]` for batch graph `b`). A graph with no
    /// kept nodes embeds to zero.
    pub fn embed_restricted(
        &self,
        tape: &mut Tape,
        params: &Bound,
        batch: &GraphBatch,
        edge_weights: Option<Var>,
        keep: &[&[usize]],
    ) -> Result<Var> {
        if keep.len() != batch.num_graphs() {
            return Err(IgmError::DimensionMismatch {
                expected: batch.num_graphs(),
                actual: keep.len(),
                context: "restricted readout node lists",
            });
        }
        let nodes = self.encoder.forward(tape, params, batch, edge_weights)?;
        let mut rows = Vec::new();
        let mut segment = Vec::new();
        for (b, local) in keep.iter().enumerate() {
            let off = batch.node_offsets[b];
            rows.extend(local.iter().map(|&v| off + v));
            segment.extend(std::iter::repeat_n(b, local.len()));
        }
        let kept = tape.gather(nodes, Rc::from(rows));
        Ok(tape.segment_mean(kept, Rc::from(segment), batch.num_graphs()))
    }

    pub fn logits(&self, tape: &mut Tape, params: &Bound, embeddings: Var) -> Var {
        self.classifier.forward(tape, params, embeddings)
    }

    /// Inference-only class probabilities for a batch.
    pub fn predict(&self, params: &ParamStore, batch: &GraphBatch) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let psi = self.embed(&mut tape, &bound, batch, None)?;
        let z = self.logits(&mut tape, &bound, psi);
        Ok(classify(tape.value(z)))
    }
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), num_classes));
    for (mut row, &y) in t.axis_iter_mut(Axis(0)).zip(labels) {
        row[y] = 1.0;
    }
    t
}
