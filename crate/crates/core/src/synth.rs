//! Spurious-motif synthetic datasets.
//!
//! Each graph is a base scaffold (tree, ladder or wheel) wired to a motif
//! (cycle, house or crane) by a few random edges. The motif decides the
//! label; the base is correlated with the label with strength `bias` on
//! train/val and independent of it on test. Node features are i.i.d.
//! Gaussian noise, so all signal is structural.
//!
//! Motif templates (5 nodes each):
//! - cycle: `0-1-2-3-4-0`
//! - house: square `0-1-2-3-0` with roof node `4` joined to `0` and `1`
//! - crane: triangle `0-1-2` with a two-edge tail `2-3-4`

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{IgmError, Result};
use crate::graph::{union_disjoint, Dataset, Graph, SplitTag};
use crate::rng::{self, Rng};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotifKind {
    Cycle,
    House,
    Crane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Tree,
    Ladder,
    Wheel,
}

impl MotifKind {
    pub const ALL: [MotifKind; 3] = [MotifKind::Cycle, MotifKind::House, MotifKind::Crane];

    pub fn class(self) -> usize {
        self as usize
    }

    fn template(self) -> &'static [(usize, usize)] {
        match self {
            MotifKind::Cycle => &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)],
            MotifKind::House => &[(0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (1, 4)],
            MotifKind::Crane => &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)],
        }
    }
}

impl BaseKind {
    pub const ALL: [BaseKind; 3] = [BaseKind::Tree, BaseKind::Ladder, BaseKind::Wheel];

    pub fn class(self) -> usize {
        self as usize
    }

    pub fn min_size(self) -> usize {
        match self {
            BaseKind::Tree => 2,
            BaseKind::Ladder | BaseKind::Wheel => 4,
        }
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub bias: f64,
    pub base_size_range: (usize, usize),
    pub feature_dim: usize,
    pub num_attach_edges: usize,
}

impl Default for MotifSpec {
    fn default() -> Self {
        MotifSpec {
            bias: 0.9,
            base_size_range: (8, 20),
            feature_dim: 4,
            num_attach_edges: 1,
        }
    }
}

impl MotifSpec {
    pub fn with_bias(bias: f64) -> MotifSpec {
        MotifSpec {
            bias,
            ..MotifSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // slack so that 1/3 rounded to two places ("0.33") is accepted
        if !(self.bias >= 1.0 / 3.0 - 5e-3 && self.bias <= 1.0) {
            return Err(IgmError::Config(format!(
                "bias {} outside [1/3, 1]",
                self.bias
            )));
        }
        let (lo, hi) = self.base_size_range;
        if lo > hi || lo < 4 {
            return Err(IgmError::Config(format!(
                "base_size_range ({lo}, {hi}) must satisfy 4 <= min <= max"
            )));
        }
        if self.feature_dim == 0 {
            return Err(IgmError::Config("feature_dim must be positive".into()));
        }
        if self.num_attach_edges == 0 {
            return Err(IgmError::Config("num_attach_edges must be >= 1".into()));
        }
        Ok(())
    }
}

fn structure(num_nodes: usize, edges: &[(usize, usize)], feature_dim: usize) -> Result<Graph> {
    Graph::from_parts(
        num_nodes,
        edges,
        Array2::zeros((num_nodes, feature_dim)),
        0,
        1,
        None,
    )
}

/// A connected base scaffold. Ladders round `size` up to an even count.
pub fn sample_base(kind: BaseKind, size: usize, feature_dim: usize, rng: &mut Rng) -> Result<Graph> {
    if size < kind.min_size() {
        return Err(IgmError::Config(format!(
            "{kind:?} base needs at least {} nodes, got {size}",
            kind.min_size()
        )));
    }
    match kind {
        BaseKind::Tree => {
            // random recursive tree
            let edges: Vec<_> = (1..size).map(|i| (rng.gen_range(0..i), i)).collect();
            structure(size, &edges, feature_dim)
        }
        BaseKind::Ladder => {
            let rungs = size.div_ceil(2);
            let mut edges = Vec::with_capacity(3 * rungs - 2);
            for i in 0..rungs {
                edges.push((i, rungs + i));
                if i + 1 < rungs {
                    edges.push((i, i + 1));
                    edges.push((rungs + i, rungs + i + 1));
                }
            }
            structure(2 * rungs, &edges, feature_dim)
        }
        BaseKind::Wheel => {
            let rim = size - 1;
            let mut edges: Vec<_> = (1..=rim).map(|i| (0, i)).collect();
            edges.extend((1..=rim).map(|i| (i, i % rim + 1)));
            structure(size, &edges, feature_dim)
        }
    }
}

pub fn sample_motif(kind: MotifKind, feature_dim: usize) -> Graph {
    structure(5, kind.template(), feature_dim).expect("motif templates are valid")
}

/// Wires `motif` to `base` with `num_attach_edges` distinct random
/// base-motif edges. The returned mask marks motif-internal edges.
pub fn attach(
    base: &Graph,
    motif: &Graph,
    num_attach_edges: usize,
    rng: &mut Rng,
) -> Result<(Graph, Vec<bool>)> {
    if num_attach_edges == 0 {
        return Err(IgmError::Config("num_attach_edges must be >= 1".into()));
    }
    let (nb, nm) = (base.num_nodes(), motif.num_nodes());
    if num_attach_edges > nb * nm {
        return Err(IgmError::Config(format!(
            "cannot place {num_attach_edges} attachment edges between {nb} and {nm} nodes"
        )));
    }
    let mut edges: Vec<(usize, usize)> = base.edges().to_vec();
    let mut mask = vec![false; base.num_edges()];
    edges.extend(motif.edges().iter().map(|&(u, v)| (u + nb, v + nb)));
    mask.extend(std::iter::repeat_n(true, motif.num_edges()));

    let mut cross = Vec::with_capacity(num_attach_edges);
    while cross.len() < num_attach_edges {
        let e = (rng.gen_range(0..nb), nb + rng.gen_range(0..nm));
        if !cross.contains(&e) {
            cross.push(e);
        }
    }
    edges.extend(&cross);
    mask.extend(std::iter::repeat_n(false, cross.len()));

    let joined = union_disjoint(base, motif)?;
    let g = Graph::from_parts(
        nb + nm,
        &edges,
        joined.features().clone(),
        0,
        1,
        Some(mask),
    )?;
    let mask = g.gt_mask().expect("mask set above").to_vec();
    Ok((g, mask))
}

/// How the base class is paired with the label.
#[derive(Debug, Clone, Copy)]
enum Pairing {
    Biased(f64),
    Uniform,
}

fn generate_graph(spec: &MotifSpec, label: usize, pairing: Pairing, rng: &mut Rng) -> Result<Graph> {
    let base_class = match pairing {
        Pairing::Biased(b) => {
            if rng.gen::<f64>() < b {
                label
            } else {
                (label + rng.gen_range(1..NUM_CLASSES)) % NUM_CLASSES
            }
        }
        Pairing::Uniform => rng.gen_range(0..NUM_CLASSES),
    };
    let (lo, hi) = spec.base_size_range;
    let size = rng.gen_range(lo..=hi);
    let base = sample_base(BaseKind::ALL[base_class], size, spec.feature_dim, rng)?;
    let motif = sample_motif(MotifKind::ALL[label], spec.feature_dim);
    let (g, mask) = attach(&base, &motif, spec.num_attach_edges, rng)?;

    let n = g.num_nodes();
    let features = Array2::from_shape_simple_fn((n, spec.feature_dim), || rng.sample(StandardNormal));
    let g = Graph::from_parts(n, g.edges(), features, label, NUM_CLASSES, Some(mask))?;
    Ok(g.with_base_class(Some(base_class)))
}

fn generate_split(
    spec: &MotifSpec,
    n: usize,
    tag: SplitTag,
    seed: u64,
) -> Result<Dataset> {
    let (pairing, split_id) = match tag {
        SplitTag::Train => (Pairing::Biased(spec.bias), 0),
        SplitTag::Val => (Pairing::Biased(spec.bias), 1),
        SplitTag::Test => (Pairing::Uniform, 2),
    };
    // labels cycle through the classes for exact balance; per-graph
    // sub-streams make each graph independent of generation order
    let mut order: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::STREAM_DATA, split_id, u64::MAX]));
    let graphs = order
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut r = rng::stream(seed, &[rng::STREAM_DATA, split_id, i as u64]);
            generate_graph(spec, label, pairing, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(graphs, NUM_CLASSES, spec.feature_dim, tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Generates `(train, val, test)`; a pure function of `(spec, sizes, seed)`.
pub fn generate_spmotif(
    spec: &MotifSpec,
    sizes: SplitSizes,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    if sizes.n_train == 0 || sizes.n_val == 0 || sizes.n_test == 0 {
        return Err(IgmError::Config("split sizes must be positive".into()));
    }
    Ok((
        generate_split(spec, sizes.n_train, SplitTag::Train, seed)?,
        generate_split(spec, sizes.n_val, SplitTag::Val, seed)?,
        generate_split(spec, sizes.n_test, SplitTag::Test, seed)?,
    ))
}

/// Fraction of graphs whose base class equals their label.
pub fn base_label_cooccurrence(ds: &Dataset) -> f64 {
    let hits = ds
        .graphs
        .iter()
        .filter(|g| g.base_class() == Some(g.label()))
        .count();
    hits as f64 / ds.len().max(1) as f64
}
