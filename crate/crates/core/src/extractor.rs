//! Invariant subgraph extractor.
//!
//! A separate message-passing encoder embeds nodes; each edge is scored
//! from the concatenation of its endpoint embeddings by a two-layer MLP
//! with sigmoid output, averaged over both orientations. Edges are then
//! sampled with a binary-concrete relaxation (straight-through in
//! training) and pruned to a node budget of `ceil(r * |V|)`.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Gnn, GraphBatch};
use crate::error::{IgmError, Result};
use crate::graph::{split_by_mask, Graph, SubgraphSplit};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;

/// Probabilities are kept this far inside (0, 1).
pub const PROB_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub ratio_cap: f64,
    pub temperature: f64,
    pub hard_eval: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            ratio_cap: 0.5,
            temperature: 1.0,
            hard_eval: true,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_cap > 0.0 && self.ratio_cap <= 1.0) {
            return Err(IgmError::Config(format!(
                "ratio_cap {} outside (0, 1]",
                self.ratio_cap
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(IgmError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Largest admissible invariant node count for a graph of `num_nodes`.
pub fn node_budget(ratio_cap: f64, num_nodes: usize) -> usize {
    // guard against 0.3 * 10 = 3.0000000000000004
    ((ratio_cap * num_nodes as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Drops selected edges until the induced node set fits the budget.
///
/// Selected edges are revisited in order of decreasing probability (ties
/// by edge index) and kept whenever their endpoints still fit.
pub fn enforce_ratio_cap(g: &Graph, mask: &mut [bool], probs: &[f64], ratio_cap: f64) {
    let budget = node_budget(ratio_cap, g.num_nodes());
    let mut touched = vec![false; g.num_nodes()];
    let mut count = 0;
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        if mask[e] {
            for x in [u, v] {
                if !touched[x] {
                    touched[x] = true;
                    count += 1;
                }
            }
        }
    }
    if count <= budget {
        return;
    }
    let mut order: Vec<usize> = (0..mask.len()).filter(|&e| mask[e]).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    touched.fill(false);
    count = 0;
    for e in order {
        let (u, v) = g.edges()[e];
        let extra = usize::from(!touched[u]) + usize::from(!touched[v]);
        if count + extra <= budget {
            touched[u] = true;
            touched[v] = true;
            count += extra;
        } else {
            mask[e] = false;
        }
    }
}

/// Nodes touched by masked-in edges.
pub fn induced_node_count(g: &Graph, mask: &[bool]) -> usize {
    let mut touched = vec![false; g.num_nodes()];
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        if mask[e] {
            touched[u] = true;
            touched[v] = true;
        }
    }
    touched.into_iter().filter(|&t| t).count()
}

/// Standard logistic noise `ln u - ln(1 - u)`, one draw per edge.
pub fn logistic_noise(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

fn logit(p: f64) -> f64 {
    p.ln() - (1.0 - p).ln()
}

/// Binary-concrete relaxation `sigmoid((logit p + noise) / tau)`.
pub fn relaxed_value(p: f64, noise: f64, temperature: f64) -> f64 {
    let x = (logit(p) + noise) / temperature;
    1.0 / (1.0 + (-x).exp())
}

/// The hard outcome the relaxed sample rounds to; `P(true) = p`.
pub fn hard_value(p: f64, noise: f64) -> bool {
    logit(p) + noise > 0.0
}

/// One sampled edge mask for a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    /// Selected edges after the ratio cap.
    pub hard: Vec<bool>,
    /// Relaxed weights (train mode only).
    pub relaxed: Option<Vec<f64>>,
    /// Logistic noise used (train mode only).
    pub noise: Option<Vec<f64>>,
}

/// Samples an invariant edge mask for `g` from its edge probabilities.
pub fn sample_mask(
    g: &Graph,
    probs: &[f64],
    cfg: &ExtractorConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<MaskSample> {
    if probs.len() != g.num_edges() {
        return Err(IgmError::MaskLength {
            expected: g.num_edges(),
            actual: probs.len(),
        });
    }
    let sample = match mode {
        Mode::Train => {
            let noise = logistic_noise(probs.len(), rng);
            let relaxed = probs
                .iter()
                .zip(&noise)
                .map(|(&p, &n)| relaxed_value(p, n, cfg.temperature))
                .collect();
            let mut hard: Vec<bool> = probs.iter().zip(&noise).map(|(&p, &n)| hard_value(p, n)).collect();
            enforce_ratio_cap(g, &mut hard, probs, cfg.ratio_cap);
            MaskSample {
                hard,
                relaxed: Some(relaxed),
                noise: Some(noise),
            }
        }
        Mode::Eval => {
            let mut hard: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
            enforce_ratio_cap(g, &mut hard, probs, cfg.ratio_cap);
            MaskSample {
                hard,
                relaxed: None,
                noise: None,
            }
        }
    };
    Ok(sample)
}

/// Per-edge probabilities of belonging to the invariant subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProbabilities(pub Vec<f64>);

/// Result of extracting one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub split: SubgraphSplit,
    pub probs: EdgeProbabilities,
    pub sample: MaskSample,
}

/// Extractor parameters: `GNN_enc` plus the edge-scoring MLP.
#[derive(Debug, Clone)]
pub struct Extractor {
    encoder: Gnn,
    head_src: ParamId,
    head_dst: ParamId,
    head_bias: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Extractor {
    pub fn new(
        store: &mut ParamStore,
        feature_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Extractor {
        let encoder = Gnn::new(store, "enc", feature_dim, hidden, layers, rng);
        let h = encoder.out_dim();
        // first MLP layer on [omega_u || omega_v], split into its two halves
        let fan_in = 2 * h;
        Extractor {
            encoder,
            head_src: store.add_uniform("enc.mlp.0.w_src", (h, hidden), fan_in, rng),
            head_dst: store.add_uniform("enc.mlp.0.w_dst", (h, hidden), fan_in, rng),
            head_bias: store.add_uniform("enc.mlp.0.b", (1, hidden), fan_in, rng),
            out_w: store.add_uniform("enc.mlp.1.w", (hidden, 1), hidden, rng),
            out_b: store.add_uniform("enc.mlp.1.b", (1, 1), hidden, rng),
        }
    }

    fn orientation_score(&self, tape: &mut Tape, params: &Bound, a: Var, b: Var, from: &Rc<[usize]>, to: &Rc<[usize]>) -> Var {
        let x = tape.gather(a, from.clone());
        let y = tape.gather(b, to.clone());
        let pre = tape.add(x, y);
        let pre = tape.add_bias(pre, params.var(self.head_bias));
        let hid = tape.relu(pre);
        let s = tape.matmul(hid, params.var(self.out_w));
        let s = tape.add_bias(s, params.var(self.out_b));
        tape.sigmoid(s)
    }

    /// Edge probabilities for every undirected batch edge, as an `E x 1`
    /// column on the tape.
    pub fn edge_probabilities(&self, tape: &mut Tape, params: &Bound, batch: &GraphBatch) -> Result<Var> {
        let omega = self.encoder.forward(tape, params, batch, None)?;
        let a = tape.matmul(omega, params.var(self.head_src));
        let b = tape.matmul(omega, params.var(self.head_dst));
        // undirected edge e is message 2e (u -> v) and 2e+1 (v -> u)
        let msgs = &batch.messages;
        let us: Rc<[usize]> = msgs.src.iter().step_by(2).copied().collect();
        let vs: Rc<[usize]> = msgs.dst.iter().step_by(2).copied().collect();
        let forward = self.orientation_score(tape, params, a, b, &us, &vs);
        let backward = self.orientation_score(tape, params, a, b, &vs, &us);
        let both = tape.add(forward, backward);
        Ok(tape.affine(both, 0.5 * (1.0 - 2.0 * PROB_MARGIN), PROB_MARGIN))
    }

    /// Inference-only edge probabilities for one graph.
    pub fn score_edges(&self, params: &ParamStore, g: &Graph) -> Result<EdgeProbabilities> {
        Ok(self.score_many(params, &[g])?.pop().expect("one graph"))
    }

    /// Inference-only edge probabilities for several graphs at once.
    pub fn score_many(&self, params: &ParamStore, graphs: &[&Graph]) -> Result<Vec<EdgeProbabilities>> {
        let batch = GraphBatch::new(graphs.iter().copied());
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let p = self.edge_probabilities(&mut tape, &bound, &batch)?;
        let col = tape.value(p);
        Ok(batch
            .edge_offsets
            .windows(2)
            .map(|w| EdgeProbabilities(col.slice(ndarray::s![w[0]..w[1], 0]).to_vec()))
            .collect())
    }

    /// Scores, samples and splits one graph.
    pub fn extract(
        &self,
        params: &ParamStore,
        g: &Graph,
        cfg: &ExtractorConfig,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Extraction> {
        let probs = self.score_edges(params, g)?;
        finish_extraction(g, probs, cfg, mode, rng)
    }

    /// Extracts many graphs, scoring them in chunks. Randomness is drawn
    /// graph by graph in order, so results match repeated [`Self::extract`].
    pub fn extract_many(
        &self,
        params: &ParamStore,
        graphs: &[&Graph],
        cfg: &ExtractorConfig,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Vec<Extraction>> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(256) {
            let probs = self.score_many(params, chunk)?;
            for (g, p) in chunk.iter().zip(probs) {
                out.push(finish_extraction(g, p, cfg, mode, rng)?);
            }
        }
        Ok(out)
    }
}

fn finish_extraction(
    g: &Graph,
    probs: EdgeProbabilities,
    cfg: &ExtractorConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Extraction> {
    let sample = sample_mask(g, &probs.0, cfg, mode, rng)?;
    let split = split_by_mask(g, &sample.hard)?;
    Ok(Extraction {
        split,
        probs,
        sample,
    })
}

/// Relaxed binary-concrete samples on the tape, for frozen noise.
pub fn relaxed_on_tape(tape: &mut Tape, probs: Var, noise: &[f64], temperature: f64) -> Var {
    let lp = tape.ln(probs);
    let q = tape.affine(probs, -1.0, 1.0);
    let lq = tape.ln(q);
    let logit = tape.sub(lp, lq);
    let n = tape.constant(Array2::from_shape_vec((noise.len(), 1), noise.to_vec()).expect("column"));
    let x = tape.add(logit, n);
    let x = tape.scale(x, 1.0 / temperature);
    tape.sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_graph;
    use rand::SeedableRng;

    fn complete(n: usize) -> Graph {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                edges.push((u, v));
            }
        }
        let f = Array2::from_shape_fn((n, 2), |(i, j)| ((i + 1) * (j + 2)) as f64 / 7.0);
        make_graph(n, &edges, f, 0, 2).unwrap()
    }

    fn extractor(seed: u64) -> (ParamStore, Extractor) {
        let mut store = ParamStore::new();
        let ex = Extractor::new(&mut store, 2, 6, 2, &mut Rng::seed_from_u64(seed));
        (store, ex)
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(node_budget(0.3, 10), 3);
        assert_eq!(node_budget(0.5, 19), 10);
        assert_eq!(node_budget(1.0, 7), 7);
    }

    #[test]
    fn probabilities_strictly_inside_unit_interval() {
        let (store, ex) = extractor(1);
        let p = ex.score_edges(&store, &complete(3)).unwrap().0;
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn score_is_orientation_symmetric() {
        // relabeling nodes in reverse flips every edge's orientation
        let (store, ex) = extractor(2);
        let g = make_graph(
            3,
            &[(0, 1), (1, 2)],
            ndarray::array![[0.1, 0.2], [0.7, -0.3], [1.0, 0.5]],
            0,
            2,
        )
        .unwrap();
        let r = make_graph(
            3,
            &[(2, 1), (1, 0)],
            ndarray::array![[1.0, 0.5], [0.7, -0.3], [0.1, 0.2]],
            0,
            2,
        )
        .unwrap();
        let a = ex.score_edges(&store, &g).unwrap().0;
        let b = ex.score_edges(&store, &r).unwrap().0;
        // g edge (0,1) is r edge (1,2)
        assert!((a[0] - b[1]).abs() < 1e-12);
        assert!((a[1] - b[0]).abs() < 1e-12);
    }

    #[test]
    fn identical_endpoints_identical_scores() {
        let (store, ex) = extractor(3);
        let f = Array2::from_elem((4, 2), 0.3);
        let g = make_graph(4, &[(0, 1), (2, 3)], f, 0, 2).unwrap();
        let p = ex.score_edges(&store, &g).unwrap().0;
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn saturated_probabilities_select_everything() {
        let g = complete(4);
        let probs = vec![1.0 - 1e-6; g.num_edges()];
        let cfg = ExtractorConfig {
            ratio_cap: 1.0,
            ..Default::default()
        };
        for mode in [Mode::Train, Mode::Eval] {
            let s = sample_mask(&g, &probs, &cfg, mode, &mut Rng::seed_from_u64(0)).unwrap();
            assert!(s.hard.iter().all(|&h| h));
        }
    }

    #[test]
    fn ratio_cap_bounds_nodes() {
        let g = complete(10);
        let cfg = ExtractorConfig {
            ratio_cap: 0.3,
            ..Default::default()
        };
        let mut rng = Rng::seed_from_u64(4);
        for _ in 0..200 {
            let probs: Vec<f64> = (0..g.num_edges()).map(|_| rng.gen_range(0.01..0.99)).collect();
            for mode in [Mode::Train, Mode::Eval] {
                let s = sample_mask(&g, &probs, &cfg, mode, &mut rng).unwrap();
                assert!(induced_node_count(&g, &s.hard) <= 3);
            }
        }
    }

    #[test]
    fn greedy_cap_prefers_high_probability() {
        // path 0-1-2-3, budget 2 nodes keeps the single best edge
        let g = make_graph(4, &[(0, 1), (1, 2), (2, 3)], Array2::zeros((4, 1)), 0, 1).unwrap();
        let mut mask = vec![true; 3];
        enforce_ratio_cap(&g, &mut mask, &[0.6, 0.9, 0.7], 0.5);
        assert_eq!(mask, vec![false, true, false]);
        // ties broken by edge order
        let mut mask = vec![true; 3];
        enforce_ratio_cap(&g, &mut mask, &[0.8, 0.8, 0.8], 0.5);
        assert_eq!(mask, vec![true, false, false]);
    }

    #[test]
    fn eval_mode_is_deterministic_and_partitions() {
        let (store, ex) = extractor(5);
        let g = complete(5);
        let cfg = ExtractorConfig::default();
        let a = ex.extract(&store, &g, &cfg, Mode::Eval, &mut Rng::seed_from_u64(1)).unwrap();
        let b = ex.extract(&store, &g, &cfg, Mode::Eval, &mut Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let s = &a.split;
        assert_eq!(s.invariant.num_edges() + s.environment.num_edges(), g.num_edges());
        let mut all: Vec<usize> = s
            .invariant
            .parent_edges
            .iter()
            .chain(&s.environment.parent_edges)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..g.num_edges()).collect::<Vec<_>>());
    }

    #[test]
    fn extract_many_matches_single() {
        let (store, ex) = extractor(6);
        let gs = [complete(4), complete(5), complete(3)];
        let refs: Vec<&Graph> = gs.iter().collect();
        let cfg = ExtractorConfig::default();
        let many = ex
            .extract_many(&store, &refs, &cfg, Mode::Train, &mut Rng::seed_from_u64(9))
            .unwrap();
        let mut rng = Rng::seed_from_u64(9);
        for (g, m) in gs.iter().zip(&many) {
            let one = ex.extract(&store, g, &cfg, Mode::Train, &mut rng).unwrap();
            assert_eq!(one.sample.hard, m.sample.hard);
            for (x, y) in one.probs.0.iter().zip(&m.probs.0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temperature_limit() {
        let mut rng = Rng::seed_from_u64(11);
        let probs: Vec<f64> = (0..50).map(|_| rng.gen_range(0.05..0.95)).collect();
        let noise = logistic_noise(probs.len(), &mut rng);
        let gap = |tau: f64| {
            probs
                .iter()
                .zip(&noise)
                .map(|(&p, &n)| {
                    let hard = if hard_value(p, n) { 1.0 } else { 0.0 };
                    (relaxed_value(p, n, tau) - hard).abs()
                })
                .fold(0.0, f64::max)
        };
        let (a, b, c) = (gap(1.0), gap(0.1), gap(0.01));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn tape_relaxation_matches_scalar_formula() {
        let mut tape = Tape::new();
        let p = tape.constant(ndarray::array![[0.2], [0.7]]);
        let r = relaxed_on_tape(&mut tape, p, &[0.3, -1.1], 0.5);
        let v = tape.value(r);
        assert!((v[[0, 0]] - relaxed_value(0.2, 0.3, 0.5)).abs() < 1e-12);
        assert!((v[[1, 0]] - relaxed_value(0.7, -1.1, 0.5)).abs() < 1e-12);
    }
}
