//! Attributed undirected graphs, datasets and edge-mask splitting.
//!
//! Edges are stored once as canonical `(min, max)` pairs in sorted order.
//! Message passing materializes both directions when a batch is built.

use std::collections::HashSet;

use ndarray::{concatenate, Array2, Axis};

use crate::error::{IgmError, Result};

/// An undirected graph with per-node features and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Array2<f64>,
    label: usize,
    gt_mask: Option<Vec<bool>>,
    base_class: Option<usize>,
}

/// Validates and canonicalizes a graph. See [`Graph::from_parts`].
pub fn make_graph(
    num_nodes: usize,
    edges: &[(usize, usize)],
    features: Array2<f64>,
    label: usize,
    num_classes: usize,
) -> Result<Graph> {
    Graph::from_parts(num_nodes, edges, features, label, num_classes, None)
}

impl Graph {
    /// Builds a graph, rejecting self-loops, duplicates (in either
    /// orientation) and out-of-range endpoints. The optional ground-truth
    /// mask is permuted along with the edges when they are sorted.
    pub fn from_parts(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Array2<f64>,
        label: usize,
        num_classes: usize,
        gt_mask: Option<Vec<bool>>,
    ) -> Result<Graph> {
        if features.nrows() != num_nodes {
            return Err(IgmError::DimensionMismatch {
                expected: num_nodes,
                actual: features.nrows(),
                context: "feature rows vs num_nodes",
            });
        }
        if label >= num_classes {
            return Err(IgmError::LabelOutOfRange { label, num_classes });
        }
        if let Some(mask) = &gt_mask {
            if mask.len() != edges.len() {
                return Err(IgmError::MaskLength {
                    expected: edges.len(),
                    actual: mask.len(),
                });
            }
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(IgmError::NonFinite("node features"));
        }

        let mut seen = HashSet::with_capacity(edges.len());
        let mut canon: Vec<((usize, usize), bool)> = Vec::with_capacity(edges.len());
        for (i, &(u, v)) in edges.iter().enumerate() {
            for endpoint in [u, v] {
                if endpoint >= num_nodes {
                    return Err(IgmError::EndpointOutOfRange {
                        endpoint,
                        num_nodes,
                    });
                }
            }
            if u == v {
                return Err(IgmError::SelfLoop(u));
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(IgmError::DuplicateEdge(e.0, e.1));
            }
            let flag = gt_mask.as_ref().map(|m| m[i]).unwrap_or(false);
            canon.push((e, flag));
        }
        canon.sort_unstable_by_key(|&(e, _)| e);

        let gt_mask = gt_mask.map(|_| canon.iter().map(|&(_, f)| f).collect());
        Ok(Graph {
            num_nodes,
            edges: canon.into_iter().map(|(e, _)| e).collect(),
            features,
            label,
            gt_mask,
            base_class: None,
        })
    }

    /// A graph with `d`-dimensional features and no nodes.
    pub fn empty(feature_dim: usize) -> Graph {
        Graph {
            num_nodes: 0,
            edges: Vec::new(),
            features: Array2::zeros((0, feature_dim)),
            label: 0,
            gt_mask: None,
            base_class: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn gt_mask(&self) -> Option<&[bool]> {
        self.gt_mask.as_deref()
    }

    /// Class of the spurious base scaffold, known only for synthetic data.
    pub fn base_class(&self) -> Option<usize> {
        self.base_class
    }

    /// Relabels the graph. The caller is responsible for the class range.
    pub fn with_label(mut self, label: usize) -> Graph {
        self.label = label;
        self
    }

    pub fn with_base_class(mut self, base_class: Option<usize>) -> Graph {
        self.base_class = base_class;
        self
    }

    pub fn with_gt_mask(mut self, mask: Option<Vec<bool>>) -> Result<Graph> {
        if let Some(m) = &mask {
            if m.len() != self.edges.len() {
                return Err(IgmError::MaskLength {
                    expected: self.edges.len(),
                    actual: m.len(),
                });
            }
        }
        self.gt_mask = mask;
        Ok(self)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Number of connected components (isolated nodes count as components).
    pub fn num_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.num_nodes).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut comps = self.num_nodes;
        for &(u, v) in &self.edges {
            let (a, b) = (find(&mut parent, u), find(&mut parent, v));
            if a != b {
                parent[a] = b;
                comps -= 1;
            }
        }
        comps
    }

    /// Index of edge `(u, v)` in canonical order, if present.
    pub fn edge_index(&self, u: usize, v: usize) -> Option<usize> {
        self.edges.binary_search(&(u.min(v), u.max(v))).ok()
    }
}

/// Disjoint union: `g2`'s node ids are shifted by `g1.num_nodes()`.
///
/// The result carries `g1`'s label as a placeholder; callers assign the
/// real one. A ground-truth mask is produced when either side has one,
/// with the missing side filled with `false`.
pub fn union_disjoint(g1: &Graph, g2: &Graph) -> Result<Graph> {
    if g1.feature_dim() != g2.feature_dim() {
        return Err(IgmError::DimensionMismatch {
            expected: g1.feature_dim(),
            actual: g2.feature_dim(),
            context: "union_disjoint feature_dim",
        });
    }
    let offset = g1.num_nodes;
    // every g2 edge sorts after every g1 edge, so concatenation stays canonical
    let edges: Vec<(usize, usize)> = g1
        .edges
        .iter()
        .copied()
        .chain(g2.edges.iter().map(|&(u, v)| (u + offset, v + offset)))
        .collect();
    let gt_mask = match (&g1.gt_mask, &g2.gt_mask) {
        (None, None) => None,
        (a, b) => {
            let mut m = a.clone().unwrap_or_else(|| vec![false; g1.num_edges()]);
            m.extend(b.clone().unwrap_or_else(|| vec![false; g2.num_edges()]));
            Some(m)
        }
    };
    Ok(Graph {
        num_nodes: g1.num_nodes + g2.num_nodes,
        edges,
        features: concatenate(Axis(0), &[g1.features.view(), g2.features.view()])
            .expect("feature dims checked above"),
        label: g1.label,
        gt_mask,
        base_class: g1.base_class,
    })
}

/// An edge-induced subgraph of a parent graph, relabeled to local ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    /// Local graph; inherits the parent's label, base class and the
    /// restriction of its ground-truth mask.
    pub graph: Graph,
    /// Parent node id of each local node (sorted ascending).
    pub nodes: Vec<usize>,
    /// Parent edge index of each local edge.
    pub parent_edges: Vec<usize>,
}

impl Subgraph {
    fn induced(parent: &Graph, edge_ids: Vec<usize>) -> Subgraph {
        let mut nodes: Vec<usize> = edge_ids
            .iter()
            .flat_map(|&e| {
                let (u, v) = parent.edges[e];
                [u, v]
            })
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        let mut local = vec![usize::MAX; parent.num_nodes];
        for (i, &n) in nodes.iter().enumerate() {
            local[n] = i;
        }
        // local relabeling is monotone, so canonical order is preserved
        let edges = edge_ids
            .iter()
            .map(|&e| {
                let (u, v) = parent.edges[e];
                (local[u], local[v])
            })
            .collect();
        let features = parent.features.select(Axis(0), &nodes);
        let gt_mask = parent
            .gt_mask
            .as_ref()
            .map(|m| edge_ids.iter().map(|&e| m[e]).collect());
        Subgraph {
            graph: Graph {
                num_nodes: nodes.len(),
                edges,
                features,
                label: parent.label,
                gt_mask,
                base_class: parent.base_class,
            },
            nodes,
            parent_edges: edge_ids,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.graph.num_edges()
    }
}

/// Partition of a graph's edges into an invariant part and its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphSplit {
    pub invariant_edge_mask: Vec<bool>,
    pub invariant: Subgraph,
    pub environment: Subgraph,
}

impl SubgraphSplit {
    /// Parent node ids touched by invariant edges.
    pub fn invariant_nodes(&self) -> &[usize] {
        &self.invariant.nodes
    }
}

/// Splits `g` into the subgraph induced by the masked-in edges and the one
/// induced by the masked-out edges. Node features travel to both parts for
/// every node incident to that part.
pub fn split_by_mask(g: &Graph, mask: &[bool]) -> Result<SubgraphSplit> {
    if mask.len() != g.num_edges() {
        return Err(IgmError::MaskLength {
            expected: g.num_edges(),
            actual: mask.len(),
        });
    }
    let (inv, env): (Vec<usize>, Vec<usize>) = (0..mask.len()).partition(|&e| mask[e]);
    Ok(SubgraphSplit {
        invariant_edge_mask: mask.to_vec(),
        invariant: Subgraph::induced(g, inv),
        environment: Subgraph::induced(g, env),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// A collection of graphs sharing a feature dimension and label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(
        graphs: Vec<Graph>,
        num_classes: usize,
        feature_dim: usize,
        split_tag: SplitTag,
    ) -> Result<Dataset> {
        let ds = Dataset {
            graphs,
            num_classes,
            feature_dim,
            split_tag,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(IgmError::InvalidGraph("num_classes must be positive".into()));
        }
        for g in &self.graphs {
            if g.feature_dim() != self.feature_dim {
                return Err(IgmError::DimensionMismatch {
                    expected: self.feature_dim,
                    actual: g.feature_dim(),
                    context: "graph feature_dim vs dataset",
                });
            }
            if g.label >= self.num_classes {
                return Err(IgmError::LabelOutOfRange {
                    label: g.label,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(Graph::label).collect()
    }

    /// Graph count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.graphs {
            counts[g.label] += 1;
        }
        counts
    }
}
