//! Environment mixup (graph surgery across labels) and invariant mixup
//! (convex combination of invariant-subgraph embeddings).

use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::Beta;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{IgmError, Result};
use crate::graph::{Graph, Subgraph, SubgraphSplit};
use crate::rng::{self, Rng};

/// Cyclic label shift `y -> (y + k) mod C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelMap {
    pub k: usize,
    pub num_classes: usize,
}

impl LabelMap {
    pub fn new(k: usize, num_classes: usize) -> Result<LabelMap> {
        if k == 0 || k >= num_classes {
            return Err(IgmError::Config(format!(
                "label shift {k} must be in 1..{num_classes}"
            )));
        }
        Ok(LabelMap { k, num_classes })
    }

    pub fn apply(&self, y: usize) -> usize {
        (y + self.k) % self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    /// Number of augmented environments `K`.
    pub num_envs: usize,
    pub r_add: f64,
    pub alpha: f64,
    pub delta: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            num_envs: 2,
            r_add: 0.1,
            alpha: 1.0,
            delta: 1.0,
        }
    }
}

/// Where an edge of a mixed graph came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeOrigin {
    /// Edge `e` of the invariant donor's parent graph.
    Invariant(usize),
    /// Edge `e` of the environment donor's parent graph.
    Environment(usize),
    /// Inserted between the two parts.
    Cross,
}

/// A mixed graph with per-edge provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    pub graph: Graph,
    pub origin: Vec<EdgeOrigin>,
    pub added_edges: usize,
}

/// Number of cross edges inserted when joining subgraphs with `inv_edges`
/// and `env_edges` edges.
pub fn cross_edge_count(r_add: f64, inv_edges: usize, env_edges: usize) -> usize {
    ((r_add * (inv_edges + env_edges) as f64).round() as usize).max(1)
}

fn endpoint_weights(sub: &Subgraph) -> Vec<f64> {
    sub.graph
        .degrees()
        .into_iter()
        .map(|d| if d == 0 { 1.0 } else { d as f64 })
        .collect()
}

/// Joins an invariant subgraph with an environment subgraph from another
/// graph, inserting degree-proportional random cross edges. The result is
/// labeled `label` (the invariant donor's label).
///
/// If either side is empty the invariant part is returned alone.
pub fn environment_mix(
    inv: &Subgraph,
    env: &Subgraph,
    label: usize,
    r_add: f64,
    rng: &mut Rng,
) -> Result<Mix> {
    if r_add.is_nan() || r_add <= 0.0 {
        return Err(IgmError::Config(format!("r_add {r_add} must be positive")));
    }
    if inv.num_nodes() == 0 || env.num_nodes() == 0 {
        log::debug!(
            "degenerate environment mix ({} invariant nodes, {} environment nodes)",
            inv.num_nodes(),
            env.num_nodes()
        );
        return Ok(Mix {
            graph: inv.graph.clone().with_label(label),
            origin: inv.parent_edges.iter().map(|&e| EdgeOrigin::Invariant(e)).collect(),
            added_edges: 0,
        });
    }
    if inv.graph.feature_dim() != env.graph.feature_dim() {
        return Err(IgmError::DimensionMismatch {
            expected: inv.graph.feature_dim(),
            actual: env.graph.feature_dim(),
            context: "environment_mix feature_dim",
        });
    }

    let (ni, ne) = (inv.num_nodes(), env.num_nodes());
    // cannot insert more distinct cross edges than node pairs
    let n_add = cross_edge_count(r_add, inv.num_edges(), env.num_edges()).min(ni * ne);

    let wi = WeightedIndex::new(endpoint_weights(inv)).expect("positive weights");
    let we = WeightedIndex::new(endpoint_weights(env)).expect("positive weights");
    let mut cross = Vec::with_capacity(n_add);
    let mut seen = HashSet::with_capacity(n_add);
    while cross.len() < n_add {
        let (a, b) = (wi.sample(rng), we.sample(rng));
        if seen.insert((a, b)) {
            cross.push((a, ni + b));
        }
    }

    let mut tagged: Vec<((usize, usize), EdgeOrigin, bool)> =
        Vec::with_capacity(inv.num_edges() + env.num_edges() + n_add);
    let inv_gt = inv.graph.gt_mask();
    for (k, (&e, &pe)) in inv.graph.edges().iter().zip(&inv.parent_edges).enumerate() {
        tagged.push((e, EdgeOrigin::Invariant(pe), inv_gt.is_some_and(|m| m[k])));
    }
    for (&(u, v), &pe) in env.graph.edges().iter().zip(&env.parent_edges) {
        tagged.push(((u + ni, v + ni), EdgeOrigin::Environment(pe), false));
    }
    for &e in &cross {
        tagged.push((e, EdgeOrigin::Cross, false));
    }
    tagged.sort_unstable_by_key(|t| t.0);

    let edges: Vec<(usize, usize)> = tagged.iter().map(|t| t.0).collect();
    let features = ndarray::concatenate(
        ndarray::Axis(0),
        &[inv.graph.features().view(), env.graph.features().view()],
    )
    .expect("feature dims checked");
    let gt = inv_gt.map(|_| tagged.iter().map(|t| t.2).collect());
    let graph = Graph::from_parts(ni + ne, &edges, features, 0, 1, gt)?
        .with_label(label)
        .with_base_class(env.graph.base_class());
    Ok(Mix {
        graph,
        origin: tagged.into_iter().map(|t| t.1).collect(),
        added_edges: n_add,
    })
}

/// A training graph of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvGraph {
    pub mix: Mix,
    /// Training index supplying the invariant part (and the label).
    pub inv_donor: usize,
    /// Training index supplying the environment part.
    pub env_donor: usize,
}

/// `K + 1` environments; index 0 holds the original training graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSet {
    pub environments: Vec<Vec<EnvGraph>>,
}

impl EnvironmentSet {
    pub fn num_envs(&self) -> usize {
        self.environments.len()
    }
}

/// Clamps `K` to `C - 1`, warning when it had to.
pub fn effective_num_envs(requested: usize, num_classes: usize) -> usize {
    let max = num_classes.saturating_sub(1);
    if requested > max {
        log::warn!("K = {requested} exceeds C - 1 = {max}; clamping");
        max
    } else {
        requested
    }
}

/// Builds the original environment plus `K` augmented ones. For every
/// training graph `i` and shift `k`, an environment donor is drawn
/// uniformly (with replacement) among graphs labeled `(y_i + k) mod C`.
pub fn build_environments(
    graphs: &[Graph],
    splits: &[SubgraphSplit],
    num_classes: usize,
    num_envs: usize,
    r_add: f64,
    rng: &mut Rng,
) -> Result<EnvironmentSet> {
    if graphs.len() != splits.len() {
        return Err(IgmError::Config(format!(
            "{} graphs but {} splits",
            graphs.len(),
            splits.len()
        )));
    }
    let k_eff = effective_num_envs(num_envs, num_classes);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, g) in graphs.iter().enumerate() {
        by_class[g.label()].push(i);
    }

    let original = graphs
        .iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (g, s))| EnvGraph {
            mix: Mix {
                graph: g.clone(),
                origin: s
                    .invariant_edge_mask
                    .iter()
                    .enumerate()
                    .map(|(e, &m)| {
                        if m {
                            EdgeOrigin::Invariant(e)
                        } else {
                            EdgeOrigin::Environment(e)
                        }
                    })
                    .collect(),
                added_edges: 0,
            },
            inv_donor: i,
            env_donor: i,
        })
        .collect();
    let mut environments = vec![original];

    let base_seed: u64 = rng.gen();
    for k in 1..=k_eff {
        let map = LabelMap::new(k, num_classes)?;
        let env = graphs
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let target = map.apply(g.label());
                let pool = &by_class[target];
                if pool.is_empty() {
                    return Err(IgmError::Config(format!(
                        "no training graphs of class {target} to donate environments"
                    )));
                }
                let mut r = rng::stream(base_seed, &[k as u64, i as u64]);
                let j = pool[r.gen_range(0..pool.len())];
                let mix = environment_mix(
                    &splits[i].invariant,
                    &splits[j].environment,
                    g.label(),
                    r_add,
                    &mut r,
                )?;
                Ok(EnvGraph {
                    mix,
                    inv_donor: i,
                    env_donor: j,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        environments.push(env);
    }
    Ok(EnvironmentSet { environments })
}

/// Total-variation distance between the empirical `(base class, label)`
/// distributions of two collections. Graphs without a base class are
/// skipped.
pub fn base_label_tv_distance(a: &[&Graph], b: &[&Graph], num_classes: usize, num_bases: usize) -> f64 {
    let joint = |gs: &[&Graph]| {
        let mut h = vec![0.0; num_classes * num_bases];
        let mut n = 0.0;
        for g in gs {
            if let Some(base) = g.base_class() {
                h[base * num_classes + g.label()] += 1.0;
                n += 1.0;
            }
        }
        h.iter_mut().for_each(|x| *x /= f64::max(n, 1.0));
        h
    };
    let (ha, hb) = (joint(a), joint(b));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Draws a mixing coefficient `lambda ~ Beta(alpha, alpha)`.
pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| IgmError::Config(format!("invalid mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// Mixed embedding, mixed soft label and the coefficient used.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantMix {
    pub embedding: Array1<f64>,
    pub target: Array1<f64>,
    pub lambda: f64,
}

/// `lambda * psi_i + (1 - lambda) * psi_j` with the matching one-hot mix.
pub fn mix_with_lambda(
    psi_i: &Array1<f64>,
    y_i: usize,
    psi_j: &Array1<f64>,
    y_j: usize,
    num_classes: usize,
    lambda: f64,
) -> Result<InvariantMix> {
    if psi_i.len() != psi_j.len() {
        return Err(IgmError::DimensionMismatch {
            expected: psi_i.len(),
            actual: psi_j.len(),
            context: "invariant_mix embeddings",
        });
    }
    if y_i >= num_classes || y_j >= num_classes {
        return Err(IgmError::LabelOutOfRange {
            label: y_i.max(y_j),
            num_classes,
        });
    }
    let mut target = Array1::zeros(num_classes);
    target[y_i] += lambda;
    target[y_j] += 1.0 - lambda;
    Ok(InvariantMix {
        embedding: psi_i * lambda + psi_j * (1.0 - lambda),
        target,
        lambda,
    })
}

pub fn invariant_mix(
    psi_i: &Array1<f64>,
    y_i: usize,
    psi_j: &Array1<f64>,
    y_j: usize,
    num_classes: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<InvariantMix> {
    let lambda = sample_lambda(alpha, rng)?;
    mix_with_lambda(psi_i, y_i, psi_j, y_j, num_classes, lambda)
}

/// Pairs batch position `i` with `perm[i]` for a uniform random permutation.
pub fn pair_for_invariant_mix(batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..batch_size).collect();
    perm.shuffle(rng);
    perm
}

/// Mixes embedding rows on the tape: row `i` becomes
/// `lambda_i * psi_i + (1 - lambda_i) * psi_perm[i]`.
pub fn mix_embeddings_on_tape(tape: &mut Tape, psi: Var, perm: &[usize], lambdas: &[f64]) -> Var {
    let partner = tape.gather(psi, Rc::from(perm));
    let a = tape.row_scale(psi, lambdas.to_vec());
    let b = tape.row_scale(partner, lambdas.iter().map(|l| 1.0 - l).collect());
    tape.add(a, b)
}

/// Soft targets matching [`mix_embeddings_on_tape`].
pub fn mixed_targets(labels: &[usize], perm: &[usize], lambdas: &[f64], num_classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), num_classes));
    for (i, (&p, &l)) in perm.iter().zip(lambdas).enumerate() {
        t[[i, labels[i]]] += l;
        t[[i, labels[p]]] += 1.0 - l;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_graph, split_by_mask};
    use ndarray::array;
    use rand::SeedableRng;

    fn path(n: usize, label: usize) -> Graph {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        make_graph(n, &edges, Array2::zeros((n, 2)), label, 3).unwrap()
    }

    fn star(leaves: usize) -> Graph {
        let edges: Vec<_> = (1..=leaves).map(|i| (0, i)).collect();
        make_graph(leaves + 1, &edges, Array2::zeros((leaves + 1, 2)), 1, 3).unwrap()
    }

    #[test]
    fn label_map_is_a_derangement_bijection() {
        for k in 1..3 {
            let m = LabelMap::new(k, 3).unwrap();
            let mut image: Vec<usize> = (0..3).map(|y| m.apply(y)).collect();
            assert!((0..3).all(|y| m.apply(y) != y));
            image.sort_unstable();
            assert_eq!(image, vec![0, 1, 2]);
        }
        assert!(LabelMap::new(0, 3).is_err());
        assert!(LabelMap::new(3, 3).is_err());
    }

    #[test]
    fn mix_counts() {
        // 6-node path gives a 5-edge invariant part
        let a = split_by_mask(&path(6, 0), &[true; 5]).unwrap();
        let b = split_by_mask(&path(6, 1), &[false; 5]).unwrap();
        let mix = environment_mix(&a.invariant, &b.environment, 0, 0.1, &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(mix.added_edges, 1);
        assert_eq!(mix.graph.num_edges(), 11);
        assert_eq!(mix.graph.num_nodes(), 12);
        assert_eq!(mix.graph.label(), 0);
        assert_eq!(mix.graph.num_components(), 1);
        let cross = mix.origin.iter().filter(|o| **o == EdgeOrigin::Cross).count();
        assert_eq!(cross, 1);
    }

    #[test]
    fn degenerate_mix_returns_invariant_part() {
        let a = split_by_mask(&path(4, 2), &[true, true, false]).unwrap();
        let empty = split_by_mask(&path(4, 0), &[true; 3]).unwrap();
        let mix = environment_mix(&a.invariant, &empty.environment, 2, 0.5, &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(mix.graph.num_edges(), 2);
        assert_eq!(mix.added_edges, 0);
        assert_eq!(mix.graph.label(), 2);
    }

    #[test]
    fn hub_frequency_is_degree_proportional() {
        let env = split_by_mask(&star(4), &[false; 4]).unwrap().environment;
        let hub_local = env.nodes.iter().position(|&n| n == 0).unwrap();
        let w = WeightedIndex::new(endpoint_weights(&env)).unwrap();
        let mut rng = Rng::seed_from_u64(42);
        let hits = (0..10_000).filter(|_| w.sample(&mut rng) == hub_local).count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn environments_follow_label_map() {
        let graphs: Vec<Graph> = (0..30).map(|i| path(5, i % 3)).collect();
        let splits: Vec<_> = graphs
            .iter()
            .map(|g| split_by_mask(g, &[true, true, false, false]).unwrap())
            .collect();
        let set = build_environments(&graphs, &splits, 3, 2, 0.2, &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(set.num_envs(), 3);
        for (k, env) in set.environments.iter().enumerate() {
            assert_eq!(env.len(), 30);
            for eg in env {
                let y = graphs[eg.inv_donor].label();
                assert_eq!(eg.mix.graph.label(), y);
                assert_eq!(graphs[eg.env_donor].label(), (y + k) % 3);
            }
        }
    }

    #[test]
    fn empty_donor_class_is_config_error() {
        let graphs: Vec<Graph> = (0..4).map(|i| path(4, i % 2)).collect();
        let splits: Vec<_> = graphs
            .iter()
            .map(|g| split_by_mask(g, &[true, false, false]).unwrap())
            .collect();
        // class 2 has no members, so the k = 1 shift from class 1 fails
        let err = build_environments(&graphs, &splits, 3, 1, 0.2, &mut Rng::seed_from_u64(1));
        assert!(matches!(err, Err(IgmError::Config(_))));
    }

    #[test]
    fn k_is_clamped() {
        assert_eq!(effective_num_envs(5, 2), 1);
        assert_eq!(effective_num_envs(2, 3), 2);
    }

    #[test]
    fn invariant_mix_endpoints_and_midpoint() {
        let a = array![0.0, 2.0];
        let b = array![2.0, 0.0];
        let m = mix_with_lambda(&a, 0, &b, 1, 3, 1.0).unwrap();
        assert_eq!(m.embedding, a);
        assert_eq!(m.target, array![1.0, 0.0, 0.0]);
        let m = mix_with_lambda(&a, 0, &b, 1, 3, 0.5).unwrap();
        assert_eq!(m.embedding, array![1.0, 1.0]);
        assert!(mix_with_lambda(&a, 0, &array![1.0], 1, 3, 0.5).is_err());
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = invariant_mix(&a, 2, &b, 1, 3, 0.4, &mut rng).unwrap();
            assert!((m.target.sum() - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&m.lambda));
        }
    }

    #[test]
    fn pairing_is_a_seeded_permutation() {
        let p = pair_for_invariant_mix(17, &mut Rng::seed_from_u64(8));
        let mut s = p.clone();
        s.sort_unstable();
        assert_eq!(s, (0..17).collect::<Vec<_>>());
        assert_eq!(p, pair_for_invariant_mix(17, &mut Rng::seed_from_u64(8)));
    }

    #[test]
    fn tape_mix_matches_reference() {
        let mut tape = Tape::new();
        let psi = tape.constant(array![[0.0, 2.0], [2.0, 0.0], [1.0, 1.0]]);
        let perm = [1, 0, 2];
        let lambdas = [0.5, 0.25, 0.9];
        let mixed = mix_embeddings_on_tape(&mut tape, psi, &perm, &lambdas);
        let v = tape.value(mixed);
        assert_eq!(v.row(0), array![1.0, 1.0]);
        assert_eq!(v.row(1), array![0.5, 1.5]);
        let t = mixed_targets(&[0, 1, 2], &perm, &lambdas, 3);
        assert_eq!(t.row(1), array![0.75, 0.25, 0.0]);
        assert!((t.row(2)[2] - 1.0).abs() < 1e-12);
    }
}
