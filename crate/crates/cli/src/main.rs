use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use igm_core::comixup::{EdgeOrigin, EnvironmentSet};
use igm_core::compare::{compare, render_table};
use igm_core::evaluate::{evaluate, Metrics};
use igm_core::io::{load_dataset, serialize_dataset, DatasetFile, GraphRecord, SCHEMA_VERSION};
use igm_core::synth::{generate_spmotif, MotifSpec, SplitSizes};
use igm_core::train::{train_observed, TrainObserver};
use igm_core::{Checkpoint, Dataset, IgmError, Model, RunConfig, SplitTag};
use serde_json::json;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] IgmError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "igm", version, about = "Invariant graph mixup for out-of-distribution graph classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic motif datasets (train, val, test).
    GenData(GenDataArgs),
    /// Train one run; writes a run directory.
    Train(TrainArgs),
    /// Evaluate a run's best checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Train several configurations over several seeds and tabulate.
    Compare(CompareArgs),
    /// Write extracted invariant masks and edge probabilities.
    ExportSubgraphs(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0.9)]
    bias: f64,
    #[arg(long, default_value_t = 3000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_val: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    feature_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_json(&read(p)?)?,
            None => RunConfig::default(),
        };
        Ok(base.with_overrides(&self.overrides)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Write each epoch's environments, in the dataset file format, under `environments/`.
    #[arg(long)]
    dump_environments: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// One config file per compared setting.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// Overrides applied to every config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Directory receiving compare.json and compare.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn provenance(extra: serde_json::Value) -> String {
    let mut v = json!({
        "tool": "igm",
        "version": env!("CARGO_PKG_VERSION"),
        "git_describe": git_describe(),
    });
    if let (Some(obj), serde_json::Value::Object(extra)) = (v.as_object_mut(), extra) {
        obj.extend(extra);
    }
    to_json(&v)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = MotifSpec {
        feature_dim: a.feature_dim,
        ..MotifSpec::with_bias(a.bias)
    };
    let sizes = SplitSizes {
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
    };
    let (train, val, test) = generate_spmotif(&spec, sizes, a.seed)?;
    mkdir(&a.out)?;
    for (name, ds) in [("train", &train), ("val", &val), ("test", &test)] {
        serialize_dataset(ds, &a.out.join(format!("{name}.json")))?;
    }
    write(
        &a.out.join("provenance.json"),
        provenance(json!({ "spec": spec, "sizes": sizes, "seed": a.seed })),
    )?;
    println!("wrote {} / {} / {} graphs to {}", train.len(), val.len(), test.len(), a.out.display());
    Ok(())
}

fn dataset_path(flag: Option<PathBuf>, cfg: Option<&String>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.map(PathBuf::from))
        .ok_or_else(|| CliError::Usage(format!("no {what} dataset: pass --{what} or set {what}_path")))
}

struct EnvDumper {
    dir: Option<PathBuf>,
    num_classes: usize,
    feature_dim: usize,
}

impl TrainObserver for EnvDumper {
    fn environments(&mut self, epoch: usize, envs: &EnvironmentSet) -> igm_core::Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        for (k, env) in envs.environments.iter().enumerate() {
            let file = DatasetFile {
                schema_version: SCHEMA_VERSION,
                num_classes: self.num_classes,
                feature_dim: self.feature_dim,
                split: Some(SplitTag::Train),
                graphs: env.iter().map(|g| GraphRecord::from_graph(&g.mix.graph)).collect(),
            };
            file.write(&dir.join(format!("epoch_{epoch}_env_{k}.json")))?;
            let donors: Vec<_> = env
                .iter()
                .map(|g| {
                    json!({
                        "inv_donor": g.inv_donor,
                        "env_donor": g.env_donor,
                        "added_edges": g.mix.added_edges,
                        "origin": g.mix.origin.iter().map(origin_tag).collect::<Vec<_>>(),
                    })
                })
                .collect();
            fs::write(
                dir.join(format!("epoch_{epoch}_env_{k}_donors.json")),
                serde_json::to_string(&donors)?,
            )?;
        }
        Ok(())
    }
}

fn origin_tag(o: &EdgeOrigin) -> serde_json::Value {
    match o {
        EdgeOrigin::Invariant(e) => json!({ "invariant": e }),
        EdgeOrigin::Environment(e) => json!({ "environment": e }),
        EdgeOrigin::Cross => json!("cross"),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    let train_path = dataset_path(a.train, cfg.train_path.as_ref(), "train")?;
    let val_path = dataset_path(a.val, cfg.val_path.as_ref(), "val")?;
    cfg.train_path = Some(train_path.display().to_string());
    cfg.val_path = Some(val_path.display().to_string());
    let train_ds = load_dataset(&train_path)?;
    let val_ds = load_dataset(&val_path)?;

    let run_dir = a.out.join(format!("{}-{}-s{}", cfg.method.name(), cfg.family_hash(), cfg.seed));
    let done = run_dir.join("DONE");
    if done.exists() {
        return Err(CliError::Usage(format!(
            "{} is a completed run; remove it to train again",
            run_dir.display()
        )));
    }
    mkdir(&run_dir)?;
    write(&run_dir.join("config.json"), to_json(&cfg))?;
    write(
        &run_dir.join("provenance.json"),
        provenance(json!({
            "config_hash": cfg.hash(),
            "family_hash": cfg.family_hash(),
            "seed": cfg.seed,
            "ratio_cap": cfg.r,
        })),
    )?;
    let mut dumper = EnvDumper {
        dir: None,
        num_classes: train_ds.num_classes,
        feature_dim: train_ds.feature_dim,
    };
    if a.dump_environments {
        let dir = run_dir.join("environments");
        mkdir(&dir)?;
        dumper.dir = Some(dir);
    }

    let out = train_observed(&cfg, &train_ds, &val_ds, &mut dumper)?;
    let history: String = out
        .history
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect();
    write(&run_dir.join("history.jsonl"), history)?;
    out.best.save(&run_dir.join("checkpoint.json"))?;
    out.initial.save(&run_dir.join("checkpoint_initial.json"))?;

    let model = Model::from_checkpoint(&out.best)?;
    let val_metrics = evaluate(&model, &val_ds, &cfg.extractor_config(), cfg.seed)?.metrics;
    write(
        &run_dir.join("metrics.json"),
        to_json(&json!({ "val": val_metrics, "stats": out.stats })),
    )?;
    write(&done, "")?;
    println!(
        "{}: best epoch {}, val accuracy {:.4}",
        run_dir.display(),
        out.stats.best_epoch,
        out.stats.best_val_acc
    );
    Ok(())
}

fn load_run(run: &Path) -> Result<(Checkpoint, Model)> {
    if !run.join("DONE").exists() {
        return Err(CliError::Usage(format!("{} is not a completed run", run.display())));
    }
    let ckpt = Checkpoint::load(&run.join("checkpoint.json"))?;
    let model = Model::from_checkpoint(&ckpt)?;
    Ok((ckpt, model))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (ckpt, model) = load_run(&a.run)?;
    let ds = load_dataset(&a.data)?;
    let m: Metrics = evaluate(&model, &ds, &ckpt.config.extractor_config(), ckpt.config.seed)?.metrics;
    let stem = a.data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    write(&a.run.join(format!("eval_{stem}.json")), to_json(&m))?;
    println!("{}", to_json(&m));
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let configs = a
        .configs
        .iter()
        .map(|p| Ok(RunConfig::from_json(&read(p)?)?.with_overrides(&a.overrides)?))
        .collect::<Result<Vec<_>>>()?;
    let train_ds = load_dataset(&a.train)?;
    let val = load_dataset(&a.val)?;
    let test = load_dataset(&a.test)?;
    let rows = compare(&configs, &a.seeds, &train_ds, &val, &test)?;
    mkdir(&a.out)?;
    write(&a.out.join("compare.json"), to_json(&rows))?;
    let table = render_table(&rows);
    write(&a.out.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let (ckpt, model) = load_run(&a.run)?;
    let ds: Dataset = load_dataset(&a.data)?;
    let ev = evaluate(&model, &ds, &ckpt.config.extractor_config(), ckpt.config.seed)?;
    let extractions = ev
        .extractions
        .ok_or_else(|| CliError::Usage(format!("method {} has no extractor", ckpt.config.method.name())))?;
    let mut file = DatasetFile::from_dataset(&ds);
    for (rec, ex) in file.graphs.iter_mut().zip(&extractions) {
        rec.pred_mask = Some(ex.sample.hard.clone());
        rec.edge_probs = Some(ex.probs.0.clone());
    }
    file.write(&a.out)?;
    println!("wrote {} graphs to {}", file.graphs.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::ExportSubgraphs(a) => export_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
