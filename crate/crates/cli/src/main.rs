mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::{json, Map, Value};
use tspkit::baselines::{kge_tsp_predict, mine_rules, read_rules, rule_inference, write_rules, InferenceConfig, RuleMiningConfig};
use tspkit::datagen::{generate_dataset, FamilyConfig, SplitRatios};
use tspkit::htem::{train_htem, HtemConfig, HtemModel};
use tspkit::kg::load_dir;
use tspkit::kge::{train_kge, KgeConfig, KgeKind, KgeModel};
use tspkit::metrics::{evaluate, Assumption, AssumptionConfig};
use tspkit::partition::{partition, PartitionParams, PartitionResult};
use tspkit::pipeline::{gpht_predict, GphtParams, PredictedTripleSet};
use tspkit::{seed, DatasetSplit};

use config::{Model, RunConfig};

#[derive(Parser)]
#[command(name = "tspkit", version, about = "Triple set prediction for knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic family KG and split it into --out.
    Datagen,
    /// Partition the training graph into overlapping subgraphs.
    Partition,
    /// Train a model and write its checkpoint.
    Train {
        #[arg(value_enum)]
        what: TrainWhat,
    },
    /// Predict a triple set.
    Predict {
        #[arg(value_enum)]
        method: Method,
    },
    /// Score a prediction file against the test split.
    Evaluate {
        #[arg(value_enum)]
        mode: Mode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainWhat {
    Kge,
    Htem,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Gpht,
    Ruletensor,
    Kgetsp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cwa,
    Powa,
}

/// Flags shared by every subcommand. Unset values fall back to the config
/// file, then to the built-in defaults.
#[derive(Args)]
struct Flags {
    /// key=value file layered between the defaults and these flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory holding train.txt, valid.txt and test.txt.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Run directory; every artifact and manifest lands here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Prediction file to evaluate.
    #[arg(long, global = true)]
    predictions: Option<PathBuf>,
    /// Fixed rule file for ruletensor instead of mining.
    #[arg(long, global = true)]
    rules: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    model: Option<Model>,
    #[arg(long = "theta-ht", global = true)]
    theta_ht: Option<f64>,
    #[arg(long = "theta-hrt", global = true)]
    theta_hrt: Option<f64>,
    #[arg(long = "theta-kge", global = true)]
    theta_kge: Option<f64>,
    #[arg(long = "theta-conf", global = true)]
    theta_conf: Option<f64>,
    #[arg(long = "theta-hc", global = true)]
    theta_hc: Option<f64>,
    #[arg(long = "theta-sim", global = true)]
    theta_sim: Option<f64>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    passes: Option<usize>,
    #[arg(long, global = true)]
    negatives: Option<usize>,
    #[arg(long, global = true)]
    hops: Option<usize>,
    #[arg(long, global = true)]
    nmin: Option<usize>,
    #[arg(long, global = true)]
    nmax: Option<usize>,
    #[arg(long = "max-iter", global = true)]
    max_iter: Option<usize>,
    #[arg(long, global = true)]
    walks: Option<usize>,
    #[arg(long, global = true)]
    people: Option<usize>,
    #[arg(long, global = true)]
    families: Option<usize>,
    #[arg(long = "no-entity-attn", global = true)]
    no_entity_attn: bool,
    #[arg(long = "no-relation-attn", global = true)]
    no_relation_attn: bool,
    #[arg(long = "train-with-valid", global = true)]
    train_with_valid: bool,
}

impl Flags {
    /// Only the flags actually given, keyed like the config file.
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("seed", self.seed.map(Value::from));
        put("model", self.model.map(|x| serde_json::to_value(x).unwrap()));
        put("theta_ht", self.theta_ht.map(Value::from));
        put("theta_hrt", self.theta_hrt.map(Value::from));
        put("theta_kge", self.theta_kge.map(Value::from));
        put("theta_conf", self.theta_conf.map(Value::from));
        put("theta_hc", self.theta_hc.map(Value::from));
        put("theta_sim", self.theta_sim.map(Value::from));
        put("dim", self.dim.map(Value::from));
        put("lr", self.lr.map(Value::from));
        put("epochs", self.epochs.map(Value::from));
        put("passes", self.passes.map(Value::from));
        put("negatives", self.negatives.map(Value::from));
        put("hops", self.hops.map(Value::from));
        put("nmin", self.nmin.map(Value::from));
        put("nmax", self.nmax.map(Value::from));
        put("max_iter", self.max_iter.map(Value::from));
        put("walks", self.walks.map(Value::from));
        put("people", self.people.map(Value::from));
        put("families", self.families.map(Value::from));
        put("entity_attn", self.no_entity_attn.then_some(Value::Bool(false)));
        put("relation_attn", self.no_relation_attn.then_some(Value::Bool(false)));
        put("train_with_valid", self.train_with_valid.then_some(Value::Bool(true)));
        m
    }
}

struct Run {
    name: String,
    cfg: RunConfig,
    dataset: Option<PathBuf>,
    out: PathBuf,
    predictions: Option<PathBuf>,
    rules: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    seed: u64,
    dataset: Option<&'a Path>,
    config: &'a RunConfig,
    outputs: Vec<String>,
    details: Value,
}

impl Run {
    fn dataset(&self) -> Result<DatasetSplit> {
        let dir = self.dataset.as_deref().context("--dataset is required for this command")?;
        load_dir(dir).with_context(|| format!("loading dataset from {}", dir.display()))
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Path of an artifact an earlier command must have produced.
    fn prerequisite(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.artifact(name);
        if !p.exists() {
            bail!("missing {}; run `tspkit {producer} --out {}` first", p.display(), self.out.display());
        }
        Ok(p)
    }

    fn module_seed(&self, label: &str) -> u64 {
        seed::derive(self.cfg.seed, label)
    }

    /// Writes `<name>.manifest.json` and `<name>.conf`; the latter replays
    /// the run through `--config`.
    fn finish(&self, outputs: &[&str], details: Value) -> Result<()> {
        let m = Manifest {
            command: &self.name,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.seed,
            dataset: self.dataset.as_deref(),
            config: &self.cfg,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            details,
        };
        fs::write(self.artifact(&format!("{}.manifest.json", self.name)), serde_json::to_string_pretty(&m)? + "\n")?;
        fs::write(self.artifact(&format!("{}.conf", self.name)), self.cfg.to_kv())?;
        Ok(())
    }
}

fn datagen(run: &Run) -> Result<()> {
    let family = FamilyConfig { n_people: run.cfg.people, n_families: run.cfg.families, ..FamilyConfig::default() };
    let (split, gen) = generate_dataset(&family, &SplitRatios::default(), run.cfg.seed)?;
    split.write_dir(&run.out)?;
    fs::write(run.artifact("generation.json"), serde_json::to_string_pretty(&gen)? + "\n")?;
    info!("{} entities, {} relations, {} triples", gen.n_entities, gen.n_relations, gen.n_triples);
    run.finish(&["train.txt", "valid.txt", "test.txt", "generation.json"], json!({}))
}

fn partition_params(cfg: &RunConfig, seed_: u64) -> PartitionParams {
    PartitionParams { hops: cfg.hops, n_min: cfg.nmin, n_max: cfg.nmax, seed: seed_, ..PartitionParams::default() }
}

fn cmd_partition(run: &Run) -> Result<()> {
    let split = run.dataset()?;
    let params = partition_params(&run.cfg, run.module_seed("partition"));
    params.validate()?;
    let part = partition(&split.train, &params)?;
    part.write_dir(&split.train, &run.artifact("partition"))?;
    info!("{} subgraphs, kept triple fraction {:.3}", part.subgraphs.len(), part.summary.kept_triple_fraction);
    run.finish(&["partition/"], serde_json::to_value(&part.summary)?)
}

fn load_partition(run: &Run, split: &DatasetSplit) -> Result<PartitionResult> {
    let dir = run.prerequisite("partition", "partition")?;
    PartitionResult::read_dir(&split.train, &dir).with_context(|| format!("reading {}", dir.display()))
}

fn baseline_kg(run: &Run, split: &DatasetSplit) -> tspkit::KnowledgeGraph {
    if run.cfg.train_with_valid {
        split.train_with_valid()
    } else {
        split.train.clone()
    }
}

fn train(run: &Run, what: TrainWhat) -> Result<()> {
    let split = run.dataset()?;
    let cfg = &run.cfg;
    match what {
        TrainWhat::Kge => {
            let d = KgeConfig::default();
            let kcfg = KgeConfig {
                kind: cfg.model.into(),
                dim: cfg.dim.unwrap_or(d.dim),
                lr: cfg.lr.unwrap_or(d.lr),
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                negatives: cfg.negatives,
                seed: run.module_seed("kge"),
                ..d
            };
            let kg = baseline_kg(run, &split);
            let t = Instant::now();
            let (model, report) = train_kge::<f64>(&kg, &split.valid, &kcfg)?;
            model.write_checkpoint(&run.artifact("kge.ckpt"))?;
            info!("kge trained in {:.1}s, best epoch {}", t.elapsed().as_secs_f64(), report.best_epoch);
            run.finish(&["kge.ckpt"], json!({ "kge": kcfg, "report": report, "seconds": t.elapsed().as_secs_f64() }))
        }
        TrainWhat::Htem => {
            let part = load_partition(run, &split)?;
            let d = HtemConfig::default();
            let kind: KgeKind = cfg.model.into();
            let dim = cfg.dim.unwrap_or(d.dim);
            let hcfg = HtemConfig {
                kind,
                dim,
                // the relation slice has to fit the encoder width
                kge_dim: d.kge_dim.min(dim / kind.relation_width(1)).max(1),
                lr: cfg.lr.unwrap_or(d.lr),
                passes: cfg.passes,
                query_fraction: cfg.query_fraction,
                entity_attention: cfg.entity_attn,
                relation_attention: cfg.relation_attn,
                seed: run.module_seed("htem"),
                ..d
            };
            let t = Instant::now();
            let (model, report) = train_htem::<f64>(&split.train, &part, &split.valid, &hcfg)?;
            model.write_checkpoint(&run.artifact("htem.ckpt"))?;
            info!("htem trained in {:.1}s, best pass {}", t.elapsed().as_secs_f64(), report.best_pass);
            run.finish(&["htem.ckpt"], json!({ "htem": hcfg, "report": report, "seconds": t.elapsed().as_secs_f64() }))
        }
    }
}

fn predict(run: &Run, method: Method) -> Result<()> {
    let split = run.dataset()?;
    let cfg = &run.cfg;
    let file = match method {
        Method::Gpht => "predict-gpht.tsv",
        Method::Ruletensor => "predict-ruletensor.tsv",
        Method::Kgetsp => "predict-kgetsp.tsv",
    };
    let t = Instant::now();
    let (kg, predicted, details, mut outputs) = match method {
        Method::Gpht => {
            let part = load_partition(run, &split)?;
            let kge = KgeModel::<f64>::read_checkpoint(&run.prerequisite("kge.ckpt", "train kge")?)?;
            let htem = HtemModel::<f64>::read_checkpoint(&run.prerequisite("htem.ckpt", "train htem")?)?;
            let params = GphtParams { theta_ht: cfg.theta_ht, theta_hrt: cfg.theta_hrt, ..GphtParams::default() };
            let out = gpht_predict(&split.train, &part, &htem, &kge, &params);
            let details = json!({ "params": params, "stages": out.stages, "n_pairs": out.n_pairs, "timings": out.timings });
            (split.train.clone(), out.predicted, details, vec![])
        }
        Method::Ruletensor => {
            let kg = baseline_kg(run, &split);
            let rules_path = run.artifact("rules.txt");
            let (rules, mined) = if let Some(fixed) = &run.rules {
                let rules = read_rules(fixed, &kg).with_context(|| format!("reading rules from {}", fixed.display()))?;
                write_rules(&rules_path, &kg, &rules)?;
                (rules, false)
            } else {
                let mcfg = RuleMiningConfig {
                    max_len: cfg.rule_len,
                    n_walks: cfg.walks,
                    theta_conf: cfg.theta_conf,
                    theta_hc: cfg.theta_hc,
                    seed: run.module_seed("rules"),
                };
                let rules = mine_rules(&kg, &mcfg);
                write_rules(&rules_path, &kg, &rules)?;
                (rules, true)
            };
            let icfg = InferenceConfig { max_iter: cfg.max_iter, stop_ratio: cfg.stop_ratio };
            let out = rule_inference(&kg, &rules, &icfg);
            info!("{} rules, {} iterations, converged {}", rules.len(), out.iterations, out.converged);
            let details = json!({
                "rules": rules.len(),
                "mined": mined,
                "iterations": out.iterations,
                "added": out.added,
                "converged": out.converged,
            });
            (kg, out.predicted, details, vec!["rules.txt"])
        }
        Method::Kgetsp => {
            let kg = baseline_kg(run, &split);
            let kge = KgeModel::<f64>::read_checkpoint(&run.prerequisite("kge.ckpt", "train kge")?)?;
            let pred = kge_tsp_predict(&kg, &kge, cfg.theta_kge);
            (kg, pred, json!({ "theta_kge": cfg.theta_kge }), vec![])
        }
    };
    predicted.write_tsv(&run.artifact(file), &kg)?;
    info!("{} predicted triples in {:.1}s -> {}", predicted.len(), t.elapsed().as_secs_f64(), run.artifact(file).display());
    outputs.push(file);
    let mut details = details;
    details["n_predicted"] = json!(predicted.len());
    details["seconds"] = json!(t.elapsed().as_secs_f64());
    run.finish(&outputs, details)
}

fn cmd_evaluate(run: &Run, mode: Mode) -> Result<()> {
    let split = run.dataset()?;
    let path = run.predictions.as_deref().context("--predictions is required for evaluate")?;
    let pred = PredictedTripleSet::read_tsv(path, &split.train)?;
    let assumption = match mode {
        Mode::Cwa => Assumption::Cwa,
        Mode::Powa => Assumption::RsPowa,
    };
    let acfg = AssumptionConfig::new(assumption, run.cfg.theta_sim)?;
    let report = evaluate(&pred.triples(), &split, &acfg)?;
    let name = format!("eval-{}.json", run.name.trim_start_matches("evaluate-"));
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(run.artifact(&name), &text)?;
    print!("{text}");
    run.finish(&[&name], json!({ "predictions": path }))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::layered(cli.flags.config.as_deref(), cli.flags.overrides())?;
    if let Some(n) = cli.flags.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("setting up the thread pool")?;
    }
    let name = match &cli.command {
        Command::Datagen => "datagen".to_string(),
        Command::Partition => "partition".to_string(),
        Command::Train { what } => format!("train-{}", what.to_possible_value().unwrap().get_name()),
        Command::Predict { method } => format!("predict-{}", method.to_possible_value().unwrap().get_name()),
        Command::Evaluate { mode } => format!("evaluate-{}", mode.to_possible_value().unwrap().get_name()),
    };
    let out = cli.flags.out.clone().context("--out is required")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let run = Run { name, cfg, dataset: cli.flags.dataset.clone(), out, predictions: cli.flags.predictions.clone(), rules: cli.flags.rules.clone() };
    match cli.command {
        Command::Datagen => datagen(&run),
        Command::Partition => cmd_partition(&run),
        Command::Train { what } => train(&run, what),
        Command::Predict { method } => predict(&run, method),
        Command::Evaluate { mode } => cmd_evaluate(&run, mode),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TSPKIT_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
