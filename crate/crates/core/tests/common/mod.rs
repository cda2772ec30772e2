//! Helpers shared by integration tests.
#![allow(dead_code)]

use igm_core::params::ParamStore;
use igm_core::{make_graph, rng, Graph};
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Random connected-ish small graphs with labels cycling through `classes`.
pub fn small_graphs(count: usize, max_nodes: usize, feature_dim: usize, classes: usize, seed: u64) -> Vec<Graph> {
    let mut r = rng::stream(seed, &[]);
    (0..count)
        .map(|i| {
            let n = r.gen_range(3..=max_nodes);
            let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (r.gen_range(0..v), v)).collect();
            for u in 0..n {
                for v in u + 1..n {
                    if r.gen_bool(0.2) && !edges.contains(&(u, v)) {
                        edges.push((u, v));
                    }
                }
            }
            let x = Array2::from_shape_fn((n, feature_dim), |_| r.sample(StandardNormal));
            make_graph(n, &edges, x, i % classes, classes).unwrap()
        })
        .collect()
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every scalar parameter.
pub fn max_relative_error(
    params: &ParamStore,
    analytic: &[Array2<f64>],
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> (f64, String) {
    let mut work = params.clone();
    let mut worst = (0.0, String::new());
    for (p, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let (rows, cols) = grad.dim();
            let at = (idx / cols.max(1), idx % cols.max(1));
            debug_assert!(at.0 < rows);
            let orig = work.values()[p][at];
            work.values_mut()[p][at] = orig + step;
            let up = loss(&work);
            work.values_mut()[p][at] = orig - step;
            let down = loss(&work);
            work.values_mut()[p][at] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad[at];
            let scale = a.abs().max(numeric.abs());
            // entries where both sides vanish carry no relative information
            let rel = if scale < 1e-7 { 0.0 } else { (a - numeric).abs() / scale };
            if rel > worst.0 {
                worst = (rel, format!("{}[{:?}]: analytic {a:e}, numeric {numeric:e}", params.names()[p], at));
            }
        }
    }
    worst
}

use igm_core::comixup::{build_environments, EnvironmentSet};
use igm_core::extractor::{Extraction, Mode};
use igm_core::train::draw_mixup;
use igm_core::{Model, RunConfig};

/// A model plus everything one IGM minibatch over all of `graphs` needs.
pub struct IgmFixture {
    pub model: Model,
    pub extractions: Vec<Extraction>,
    pub envs: EnvironmentSet,
    pub perm: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub indices: Vec<usize>,
}

impl IgmFixture {
    pub fn new(cfg: &RunConfig, graphs: &[Graph], num_classes: usize, seed: u64) -> IgmFixture {
        let model = Model::new(cfg, graphs[0].feature_dim(), num_classes);
        let refs: Vec<&Graph> = graphs.iter().collect();
        let extractions = model
            .extractor
            .as_ref()
            .unwrap()
            .extract_many(&model.params, &refs, &cfg.extractor_config(), Mode::Train, &mut rng::stream(seed, &[1]))
            .unwrap();
        let splits: Vec<_> = extractions.iter().map(|e| e.split.clone()).collect();
        let envs = build_environments(graphs, &splits, num_classes, cfg.k, cfg.r_add, &mut rng::stream(seed, &[2])).unwrap();
        let (perm, lambdas) = draw_mixup(graphs.len(), cfg.alpha, &mut rng::stream(seed, &[3])).unwrap();
        IgmFixture {
            model,
            extractions,
            envs,
            perm,
            lambdas,
            indices: (0..graphs.len()).collect(),
        }
    }

    pub fn batch<'a>(&'a self, graphs: &'a [Graph]) -> igm_core::train::IgmBatch<'a> {
        igm_core::train::IgmBatch {
            graphs,
            extractions: &self.extractions,
            envs: &self.envs,
            indices: &self.indices,
            perm: self.perm.clone(),
            lambdas: self.lambdas.clone(),
        }
    }
}

/// Small architecture for gradient checks.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        hidden: 6,
        cls_hidden: 5,
        layers: 2,
        enc_hidden: 5,
        enc_layers: 2,
        gamma: 0.7,
        mu: 0.4,
        delta: 0.8,
        ..RunConfig::default()
    }
}
