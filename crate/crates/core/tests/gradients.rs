//! Analytic gradients against central finite differences.

mod common;

use common::{max_relative_error, small_graphs, tiny_config, IgmFixture};
use igm_core::autodiff::Tape;
use igm_core::backbone::{one_hot, GraphBatch};
use igm_core::train::{EdgeWeighting, Method, RunConfig};
use igm_core::Model;

#[test]
fn backbone_cross_entropy_gradients() {
    let graphs = small_graphs(6, 7, 3, 3, 11);
    let cfg = RunConfig {
        method: Method::Erm,
        ..tiny_config()
    };
    let model = Model::new(&cfg, 3, 3);
    let labels: Vec<usize> = graphs.iter().map(|g| g.label()).collect();
    let batch = GraphBatch::new(&graphs);
    let loss = |params: &igm_core::params::ParamStore| -> (f64, Vec<ndarray::Array2<f64>>) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let psi = model.backbone.embed(&mut tape, &bound, &batch, None).unwrap();
        let z = model.backbone.logits(&mut tape, &bound, psi);
        let l = tape.cross_entropy(z, one_hot(&labels, 3));
        let mut g = tape.backward(l);
        (tape.scalar_value(l), params.gradients(&bound, &mut g))
    };
    let (_, analytic) = loss(&model.params);
    let (err, at) = max_relative_error(&model.params, &analytic, 1e-5, |p| loss(p).0);
    assert!(err <= 1e-4, "max relative error {err:e} at {at}");
}

#[test]
fn igm_relaxed_loss_gradients() {
    let graphs = small_graphs(9, 8, 4, 3, 5);
    let cfg = tiny_config();
    let fx = IgmFixture::new(&cfg, &graphs, 3, 5);
    let batch = fx.batch(&graphs);
    let (_, analytic) = fx.model.igm_loss_and_grad(&cfg, &batch, EdgeWeighting::Relaxed).unwrap();
    let mut probe = fx.model.clone();
    let (err, at) = max_relative_error(&fx.model.params, &analytic, 1e-6, |p| {
        probe.params = p.clone();
        probe.igm_loss_and_grad(&cfg, &batch, EdgeWeighting::Relaxed).unwrap().0
    });
    assert!(err <= 1e-3, "max relative error {err:e} at {at}");
}

#[test]
fn extractor_receives_gradient() {
    let graphs = small_graphs(9, 8, 4, 3, 8);
    let cfg = tiny_config();
    let fx = IgmFixture::new(&cfg, &graphs, 3, 8);
    let (_, grads) = fx
        .model
        .igm_loss_and_grad(&cfg, &fx.batch(&graphs), EdgeWeighting::StraightThrough)
        .unwrap();
    let enc_norm: f64 = fx
        .model
        .params
        .names()
        .iter()
        .zip(&grads)
        .filter(|(n, _)| n.starts_with("enc"))
        .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    assert!(enc_norm > 0.0);
}
