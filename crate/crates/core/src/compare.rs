//! Multi-seed comparison of methods on one dataset split.

use serde::{Deserialize, Serialize};

use crate::error::{IgmError, Result};
use crate::evaluate::{evaluate, Metrics};
use crate::graph::Dataset;
use crate::model::Model;
use crate::train::{train, RunConfig};

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        if xs.is_empty() {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    /// Hash of the configuration with the seed reset, shared by all seeds.
    pub config_hash: String,
    pub accuracy: Summary,
    pub auc: Summary,
    pub mcc: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery_f1: Option<Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmi: Option<Summary>,
    pub runs: Vec<SeedResult>,
}

impl CompareRow {
    pub fn from_runs(cfg: &RunConfig, runs: Vec<SeedResult>) -> CompareRow {
        let col = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Option<Summary> {
            let xs: Option<Vec<f64>> = runs.iter().map(|r| f(&r.metrics)).collect();
            xs.map(|xs| Summary::of(&xs))
        };
        CompareRow {
            method: cfg.method.name().to_string(),
            config_hash: cfg.family_hash(),
            accuracy: col(&|m| Some(m.accuracy)).expect("always present"),
            auc: col(&|m| Some(m.auc)).expect("always present"),
            mcc: col(&|m| Some(m.mcc)).expect("always present"),
            recovery_f1: col(&|m| m.recovery.map(|r| r.f1)),
            nmi: col(&|m| m.nmi),
            runs,
        }
    }
}

/// Trains one run and evaluates its best checkpoint on `test`.
pub fn run_once(cfg: &RunConfig, train_ds: &Dataset, val: &Dataset, test: &Dataset) -> Result<SeedResult> {
    let out = train(cfg, train_ds, val)?;
    let model = Model::from_checkpoint(&out.best)?;
    let ev = evaluate(&model, test, &cfg.extractor_config(), cfg.seed)?;
    Ok(SeedResult {
        seed: cfg.seed,
        best_epoch: out.stats.best_epoch,
        metrics: ev.metrics,
    })
}

/// Every configuration under every seed.
pub fn compare(
    configs: &[RunConfig],
    seeds: &[u64],
    train_ds: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<Vec<CompareRow>> {
    if seeds.is_empty() {
        return Err(IgmError::Config("compare needs at least one seed".into()));
    }
    configs
        .iter()
        .map(|cfg| {
            let runs = seeds
                .iter()
                .map(|&seed| run_once(&RunConfig { seed, ..cfg.clone() }, train_ds, val, test))
                .collect::<Result<Vec<_>>>()?;
            Ok(CompareRow::from_runs(cfg, runs))
        })
        .collect()
}

/// Plain-text table of the rows.
pub fn render_table(rows: &[CompareRow]) -> String {
    let opt = |s: Option<Summary>| s.map_or_else(|| "-".to_string(), |s| s.to_string());
    let mut out = String::from("# mean ± std over seeds; std is the population std (divides by n)\n");
    out += &format!(
        "{:<16} {:<16} {:>17} {:>17} {:>17} {:>17} {:>17}\n",
        "method", "config", "accuracy", "auc", "mcc", "recovery_f1", "nmi"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:<16} {:>17} {:>17} {:>17} {:>17} {:>17}\n",
            r.method,
            r.config_hash,
            r.accuracy.to_string(),
            r.auc.to_string(),
            r.mcc.to_string(),
            opt(r.recovery_f1),
            opt(r.nmi)
        ));
    }
    out
}
