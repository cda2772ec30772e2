//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. The training experiments (IGM and ERM on the 0.9-bias data, ERM
//! on the 0.33-bias data, three seeds each) run once and are shared.

mod common;

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{max_relative_error, small_graphs, tiny_config, IgmFixture};
use igm_core::autodiff::{softmax, Tape};
use igm_core::comixup::{cross_edge_count, environment_mix, mix_embeddings_on_tape, mixed_targets, EdgeOrigin};
use igm_core::evaluate::{environment_nmi, evaluate, extract_eval, random_mask_recovery, subgraph_recovery};
use igm_core::extractor::{sample_mask, ExtractorConfig, Mode};
use igm_core::objectives::{cross_entropy, irm_penalty, vrex_penalty};
use igm_core::synth::{generate_spmotif, MotifSpec, SplitSizes};
use igm_core::train::{train, EdgeWeighting, HistoryRecord, Method, RunConfig, TrainOutput};
use igm_core::{make_graph, rng, split_by_mask, Dataset, Graph, Model};
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SEEDS: [u64; 3] = [0, 1, 2];
const SIZES: SplitSizes = SplitSizes {
    n_train: 3000,
    n_val: 1000,
    n_test: 1000,
};
const MAX_RUN_TIME: Duration = Duration::from_secs(20 * 60);
/// Best validation epochs fall well inside this budget on this data.
const EPOCHS: usize = 50;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "[{verdict}] criterion {id} ({name}): {detail}").unwrap();
    out.flush().unwrap();
}

fn igm_config(seed: u64) -> RunConfig {
    RunConfig {
        method: Method::Igm,
        seed,
        epochs: EPOCHS,
        ..RunConfig::default()
    }
}

fn erm_config(seed: u64) -> RunConfig {
    RunConfig {
        method: Method::Erm,
        seed,
        epochs: EPOCHS,
        ..RunConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Run {
    output: TrainOutput,
    test_acc: f64,
    elapsed: Duration,
}

struct SeedRuns {
    igm: Run,
    erm: Run,
    erm_low_bias: Run,
    /// Test split of the 0.9-bias data, for the mask-based criteria.
    test: Dataset,
}

fn run(cfg: &RunConfig, data: &(Dataset, Dataset, Dataset)) -> Run {
    let start = Instant::now();
    let output = train(cfg, &data.0, &data.1).expect("training succeeds");
    let elapsed = start.elapsed();
    let model = Model::from_checkpoint(&output.best).unwrap();
    let test_acc = evaluate(&model, &data.2, &cfg.extractor_config(), cfg.seed)
        .unwrap()
        .metrics
        .accuracy;
    Run {
        output,
        test_acc,
        elapsed,
    }
}

fn experiments() -> &'static [SeedRuns] {
    static RUNS: OnceLock<Vec<SeedRuns>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let high = generate_spmotif(&MotifSpec::with_bias(0.9), SIZES, seed).unwrap();
                let low = generate_spmotif(&MotifSpec::with_bias(1.0 / 3.0), SIZES, seed).unwrap();
                let runs = SeedRuns {
                    igm: run(&igm_config(seed), &high),
                    erm: run(&erm_config(seed), &high),
                    erm_low_bias: run(&erm_config(seed), &low),
                    test: high.2,
                };
                let mut out = std::io::stdout().lock();
                writeln!(
                    out,
                    "seed {seed}: igm {:.4} ({:.0?}), erm {:.4} ({:.0?}), erm@0.33 {:.4} ({:.0?})",
                    runs.igm.test_acc,
                    runs.igm.elapsed,
                    runs.erm.test_acc,
                    runs.erm.elapsed,
                    runs.erm_low_bias.test_acc,
                    runs.erm_low_bias.elapsed
                )
                .unwrap();
                runs
            })
            .collect()
    })
}

#[test]
fn criterion_1_ood_gap() {
    let runs = experiments();
    let igm = mean(&runs.iter().map(|r| r.igm.test_acc).collect::<Vec<_>>());
    let erm = mean(&runs.iter().map(|r| r.erm.test_acc).collect::<Vec<_>>());
    let slowest = runs
        .iter()
        .flat_map(|r| [r.igm.elapsed, r.erm.elapsed])
        .max()
        .unwrap();
    let epochs_ok = igm_config(0).epochs <= 100 && erm_config(0).epochs <= 100 && igm_config(0).hidden == 64;
    let pass = igm - erm >= 0.10 && slowest <= MAX_RUN_TIME && epochs_ok;
    report(
        1,
        "OOD gap on bias 0.9",
        pass,
        &format!(
            "IGM {:.2}% vs ERM {:.2}% (margin {:+.2} points, need >= 10); slowest run {slowest:.0?}",
            100.0 * igm,
            100.0 * erm,
            100.0 * (igm - erm)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_bias_monotonicity() {
    let runs = experiments();
    let low = mean(&runs.iter().map(|r| r.erm_low_bias.test_acc).collect::<Vec<_>>());
    let high = mean(&runs.iter().map(|r| r.erm.test_acc).collect::<Vec<_>>());
    let pass = low - high >= 0.05;
    report(
        2,
        "ERM bias monotonicity",
        pass,
        &format!(
            "ERM {:.2}% at bias 0.33 vs {:.2}% at bias 0.9 (gap {:+.2} points, need >= 5)",
            100.0 * low,
            100.0 * high,
            100.0 * (low - high)
        ),
    );
    assert!(pass);
}

/// Central difference of the cross-entropy in a scalar multiplier `w` on
/// the logits, at `w = 1`.
fn dummy_scale_slope(logits: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let risk = |w: f64| cross_entropy(&softmax(&(logits * w)), targets).unwrap();
    let h = 1e-5;
    (risk(1.0 + h) - risk(1.0 - h)) / (2.0 * h)
}

#[test]
fn criterion_3_objective_identities() {
    let vrex_equal = vrex_penalty(&[0.7, 0.7, 0.7]).unwrap();
    let vrex_pair = vrex_penalty(&[0.0, 2.0]).unwrap();
    let mut r = rng::stream(3, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.gen_range(1..=6);
        let c = r.gen_range(2..=4);
        let logits = Array2::from_shape_fn((n, c), |_| 2.0 * r.sample::<f64, _>(StandardNormal));
        let mut targets = Array2::zeros((n, c));
        for i in 0..n {
            targets[[i, r.gen_range(0..c)]] = 1.0;
        }
        let oracle = dummy_scale_slope(&logits, &targets).powi(2);
        worst = worst.max((irm_penalty(&logits, &targets).unwrap() - oracle).abs());
    }
    let pass = vrex_equal == 0.0 && vrex_pair == 1.0 && worst <= 1e-6;
    report(
        3,
        "objective identities",
        pass,
        &format!("vrex(equal) = {vrex_equal}, vrex(0, 2) = {vrex_pair}, max |IRM - oracle| = {worst:e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_full_loss_gradients() {
    let start = Instant::now();
    let graphs = small_graphs(20, 8, 4, 3, 44);
    let cfg = tiny_config();
    let fx = IgmFixture::new(&cfg, &graphs, 3, 44);
    let batch = fx.batch(&graphs);
    let (_, analytic) = fx.model.igm_loss_and_grad(&cfg, &batch, EdgeWeighting::Relaxed).unwrap();
    let mut probe = fx.model.clone();
    let (err, at) = max_relative_error(&fx.model.params, &analytic, 1e-6, |p| {
        probe.params = p.clone();
        probe.igm_loss_and_grad(&cfg, &batch, EdgeWeighting::Relaxed).unwrap().0
    });
    let elapsed = start.elapsed();
    let pass = err <= 1e-3 && elapsed <= Duration::from_secs(60);
    report(
        4,
        "full-loss gradients",
        pass,
        &format!(
            "{} parameters, max relative error {err:.2e} ({at}), {elapsed:.1?}",
            fx.model.params.num_scalars()
        ),
    );
    assert!(pass);
}

fn star(leaves: usize) -> Graph {
    let edges: Vec<(usize, usize)> = (1..=leaves).map(|v| (0, v)).collect();
    make_graph(leaves + 1, &edges, Array2::zeros((leaves + 1, 2)), 0, 3).unwrap()
}

#[test]
fn criterion_5_mixup_contracts() {
    // cross-edge counts on random extractions of generated graphs
    let (train_ds, _, _) = generate_spmotif(
        &MotifSpec::with_bias(0.9),
        SplitSizes {
            n_train: 200,
            n_val: 3,
            n_test: 3,
        },
        5,
    )
    .unwrap();
    let mut r = rng::stream(5, &[]);
    let mut exact = 0;
    let mut cases = 0;
    while cases < 1000 {
        let gi = &train_ds.graphs[r.gen_range(0..train_ds.len())];
        let gj = &train_ds.graphs[r.gen_range(0..train_ds.len())];
        let mi: Vec<bool> = (0..gi.num_edges()).map(|_| r.gen_bool(0.4)).collect();
        let mj: Vec<bool> = (0..gj.num_edges()).map(|_| r.gen_bool(0.4)).collect();
        let (si, sj) = (split_by_mask(gi, &mi).unwrap(), split_by_mask(gj, &mj).unwrap());
        if si.invariant.num_edges() == 0 || sj.environment.num_edges() == 0 {
            continue;
        }
        cases += 1;
        let r_add = r.gen_range(0.01..0.5);
        let mix = environment_mix(&si.invariant, &sj.environment, gi.label(), r_add, &mut r).unwrap();
        let formula = ((r_add * (si.invariant.num_edges() + sj.environment.num_edges()) as f64).round() as usize).max(1);
        let cross = mix.origin.iter().filter(|o| matches!(o, EdgeOrigin::Cross)).count();
        let edges_ok = mix.graph.num_edges() == si.invariant.num_edges() + sj.environment.num_edges() + formula;
        if cross == formula && mix.added_edges == formula && edges_ok && mix.graph.label() == gi.label() {
            exact += 1;
        }
        assert_eq!(formula, cross_edge_count(r_add, si.invariant.num_edges(), sj.environment.num_edges()));
    }

    // lambda = 1 reproduces the unmixed loss
    let graphs = small_graphs(12, 8, 4, 3, 6);
    let cfg = RunConfig::default();
    let model = Model::new(&cfg, 4, 3);
    let labels: Vec<usize> = graphs.iter().map(|g| g.label()).collect();
    let batch = igm_core::backbone::GraphBatch::new(&graphs);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let psi = model.backbone.embed(&mut tape, &bound, &batch, None).unwrap();
    let plain_z = model.backbone.logits(&mut tape, &bound, psi);
    let plain = tape.cross_entropy(plain_z, igm_core::backbone::one_hot(&labels, 3));
    let perm: Vec<usize> = (0..graphs.len()).rev().collect();
    let ones = vec![1.0; graphs.len()];
    let mixed = mix_embeddings_on_tape(&mut tape, psi, &perm, &ones);
    let mixed_z = model.backbone.logits(&mut tape, &bound, mixed);
    let mixed_loss = tape.cross_entropy(mixed_z, mixed_targets(&labels, &perm, &ones, 3));
    let lambda_gap = (tape.scalar_value(plain) - tape.scalar_value(mixed_loss)).abs();

    // degree-proportional endpoints: hub of a 4-star has weight 4 of 8
    let hub_side = split_by_mask(&star(4), &[false; 4]).unwrap().environment;
    let inv_side = split_by_mask(&star(4), &[true; 4]).unwrap().invariant;
    let draws = 10_000;
    let (mut env_hub, mut inv_hub) = (0, 0);
    let mut r = rng::stream(9, &[]);
    for _ in 0..draws {
        let mix = environment_mix(&inv_side, &hub_side, 0, 0.01, &mut r).unwrap();
        let (u, v) = *mix
            .graph
            .edges()
            .iter()
            .zip(&mix.origin)
            .find(|(_, o)| matches!(o, EdgeOrigin::Cross))
            .unwrap()
            .0;
        // invariant nodes come first: 0..5, environment nodes 5..10
        inv_hub += usize::from(u == 0);
        env_hub += usize::from(v == 5);
    }
    let env_rate = env_hub as f64 / draws as f64;
    let inv_rate = inv_hub as f64 / draws as f64;
    let pass = exact == 1000 && lambda_gap <= 1e-6 && (env_rate - 0.5).abs() <= 0.02 && (inv_rate - 0.5).abs() <= 0.02;
    report(
        5,
        "mixup contracts",
        pass,
        &format!(
            "{exact}/1000 exact cross-edge counts; lambda=1 gap {lambda_gap:e}; hub rates {inv_rate:.4} / {env_rate:.4} (expect 0.5)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_extractor_constraints() {
    let runs = experiments();
    let checks: usize = runs.iter().map(|r| r.igm.output.stats.cap_checks).sum();
    let steps: usize = runs.iter().map(|r| r.igm.output.stats.steps).sum();

    // straight-through samples: forward hard values at the Bernoulli rate
    let g = make_graph(
        6,
        &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)],
        Array2::zeros((6, 1)),
        0,
        2,
    )
    .unwrap();
    let probs = [0.05, 0.3, 0.5, 0.7, 0.95];
    let cfg = ExtractorConfig {
        ratio_cap: 1.0,
        temperature: 1.0,
        hard_eval: true,
    };
    let draws = 10_000;
    let mut hits = [0usize; 5];
    let mut forward_is_hard = true;
    let mut r = rng::stream(6, &[]);
    for _ in 0..draws {
        let s = sample_mask(&g, &probs, &cfg, Mode::Train, &mut r).unwrap();
        let relaxed = s.relaxed.unwrap();
        let hard: Array2<f64> = Array2::from_shape_fn((5, 1), |(e, _)| if s.hard[e] { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let rel = tape.constant(Array2::from_shape_vec((5, 1), relaxed).unwrap());
        let st = tape.straight_through(rel, hard.clone());
        forward_is_hard &= *tape.value(st) == hard;
        for (e, &h) in s.hard.iter().enumerate() {
            hits[e] += usize::from(h);
        }
    }
    let worst = hits
        .iter()
        .zip(&probs)
        .map(|(&h, &p)| (h as f64 / draws as f64 - p).abs())
        .fold(0.0, f64::max);
    // every IGM run completed, so every batch passed the cap assertion
    let pass = checks > 0 && worst <= 0.02 && forward_is_hard;
    report(
        6,
        "extractor constraints",
        pass,
        &format!(
            "{checks} cap checks over {steps} IGM steps, 0 violations; max |freq - p| = {worst:.4}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_subgraph_recovery() {
    let runs = experiments();
    let mut ratios = Vec::new();
    let mut details = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let model = Model::from_checkpoint(&r.igm.output.best).unwrap();
        let ex = extract_eval(&model, &r.test.graphs, &igm_config(*seed).extractor_config())
            .unwrap()
            .unwrap();
        let masks: Vec<Vec<bool>> = ex.iter().map(|e| e.sample.hard.clone()).collect();
        let learned = subgraph_recovery(&r.test.graphs, &masks).unwrap().recall;
        let random = random_mask_recovery(&r.test.graphs, &masks, &mut rng::stream(*seed, &[99]))
            .unwrap()
            .recall;
        details.push(format!("{learned:.3}/{random:.3}"));
        ratios.push((learned, random));
    }
    let learned = mean(&ratios.iter().map(|r| r.0).collect::<Vec<_>>());
    let random = mean(&ratios.iter().map(|r| r.1).collect::<Vec<_>>());
    let factor = if random > 0.0 { learned / random } else { f64::INFINITY * learned };
    let pass = factor >= 1.5;
    report(
        7,
        "subgraph recovery",
        pass,
        &format!(
            "mean recall {learned:.4} vs size-matched random {random:.4} (x{factor:.2}, need >= 1.5); per seed {}",
            details.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_nmi_co_improvement() {
    let runs = experiments();
    let mut best = Vec::new();
    let mut initial = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let cfg = igm_config(*seed).extractor_config();
        for (ckpt, out) in [(&r.igm.output.best, &mut best), (&r.igm.output.initial, &mut initial)] {
            let model = Model::from_checkpoint(ckpt).unwrap();
            let ex = extract_eval(&model, &r.test.graphs, &cfg).unwrap().unwrap();
            out.push(environment_nmi(&model, &r.test.graphs, &ex, *seed).unwrap().unwrap());
        }
    }
    let (b, i) = (mean(&best), mean(&initial));
    let pass = b >= i;
    report(
        8,
        "NMI co-improvement",
        pass,
        &format!("environment NMI {b:.4} at best checkpoint vs {i:.4} at epoch 0 (per seed {best:.3?} vs {initial:.3?})"),
    );
    assert!(pass);
}

fn losses(history: &[HistoryRecord]) -> Vec<f64> {
    history.iter().map(|h| h.total).collect()
}

#[test]
fn criterion_9_reproducibility_and_parity() {
    let data = generate_spmotif(
        &MotifSpec::with_bias(0.9),
        SplitSizes {
            n_train: 150,
            n_val: 60,
            n_test: 60,
        },
        12,
    )
    .unwrap();
    let small = RunConfig {
        epochs: 3,
        batch_size: 32,
        hidden: 16,
        cls_hidden: 16,
        enc_hidden: 16,
        seed: 4,
        ..RunConfig::default()
    };
    let metrics = |cfg: &RunConfig| {
        let out = train(cfg, &data.0, &data.1).unwrap();
        let model = Model::from_checkpoint(&out.best).unwrap();
        let m = evaluate(&model, &data.2, &cfg.extractor_config(), cfg.seed).unwrap().metrics;
        (out.history, serde_json::to_string(&m).unwrap())
    };
    let (h1, m1) = metrics(&small);
    let (h2, m2) = metrics(&small);
    let identical = h1 == h2 && m1 == m2;

    let parity_cfg = RunConfig {
        k: 0,
        gamma: 0.0,
        mu: 0.0,
        delta: 0.0,
        r: 1.0,
        ..small.clone()
    };
    let igm = train(&parity_cfg, &data.0, &data.1).unwrap();
    let erm = train(
        &RunConfig {
            method: Method::Erm,
            ..parity_cfg.clone()
        },
        &data.0,
        &data.1,
    )
    .unwrap();
    let (li, le) = (losses(&igm.history), losses(&erm.history));
    let max_gap = li.iter().zip(&le).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = identical && li.len() == le.len() && !li.is_empty() && max_gap <= 1e-6;
    report(
        9,
        "reproducibility and parity",
        pass,
        &format!(
            "repeat run bit-identical: {identical}; IGM vs ERM per-step loss gap {max_gap:e} over {} steps",
            li.len()
        ),
    );
    assert!(pass);
}
