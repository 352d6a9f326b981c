//! The `erasehash` command line.
//!
//! Verbs: `generate-data`, `train`, `build-db`, `query`, `eval`, `ablate`.
//! Training settings come from a flat JSON file whose keys are the
//! [`TrainConfig`] field names; `--kebab-case` flags override file values.
//! Every verb writes `manifest.json` into its `--out` directory.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataset::{generate, Dataset, GenConfig};
use crate::error::{Error, Result};
use crate::eval::{self, evaluate, neighbor_report};
use crate::hash::CodeDatabase;
use crate::index::HammingIndex;
use crate::model::Model;
use crate::trainer::{log_to_csv, train, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "erasehash", version, about = "Attention-erasing deep hashing for fine-grained retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fine-grained dataset.
    GenerateData(GenerateArgs),
    /// Train the network and learn database codes.
    Train(TrainArgs),
    /// Encode the training split with a trained network.
    BuildDb(BuildDbArgs),
    /// Rank the database for one image.
    Query(QueryArgs),
    /// Evaluate query-split retrieval (MAP, precision@10).
    Eval(EvalArgs),
    /// Train and evaluate over a grid of settings.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    query_fraction: Option<f64>,
    #[arg(long)]
    motif_size: Option<usize>,
    #[arg(long)]
    backgrounds: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Flag overrides for every training setting.
#[derive(Args, Default, Clone)]
pub struct TrainOverrides {
    /// Code length in bits
    #[arg(long)]
    k: Option<usize>,
    /// Anchors sampled per iteration
    #[arg(long)]
    r: Option<usize>,
    /// Outer iterations
    #[arg(long)]
    iterations: Option<usize>,
    /// Network epochs per iteration
    #[arg(long)]
    epochs_per_iteration: Option<usize>,
    /// Triplets per SGD step
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Iterations at which lr is divided by 10, comma separated
    #[arg(long, value_delimiter = ',')]
    lr_milestones: Option<Vec<usize>>,
    /// SGD momentum
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Weight of the erased-view term
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the same-class term
    #[arg(long)]
    beta: Option<f64>,
    /// Erased regions per image
    #[arg(long)]
    n_e: Option<usize>,
    /// Side of each erased square
    #[arg(long)]
    l: Option<usize>,
    /// Floor added to the normalized attention
    #[arg(long)]
    epsilon: Option<f64>,
    /// Seed for initialization and sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Column sweeps per discrete step
    #[arg(long)]
    v_passes: Option<usize>,
    /// Build erased views
    #[arg(long)]
    srem: Option<bool>,
    /// Divide each loss term by its number of summands
    #[arg(long)]
    normalized: Option<bool>,
    /// Column update form: exact or doubled
    #[arg(long)]
    q_factor: Option<String>,
    /// Output channels per backbone stage, comma separated
    #[arg(long, value_delimiter = ',')]
    backbone_channels: Option<Vec<usize>>,
    /// Gradient-norm ceiling per batch, 0 disables
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Center hash-layer biases at initialization
    #[arg(long)]
    center_hash: Option<bool>,
    /// Start database codes with balanced bits
    #[arg(long)]
    balanced_init: Option<bool>,
    /// Keep database code bits balanced in the discrete step
    #[arg(long)]
    balanced_v: Option<bool>,
}

impl TrainOverrides {
    /// `(field, value)` for every flag that was given.
    pub fn pairs(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        macro_rules! collect {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    out.push((stringify!($field).to_string(), json!(v)));
                })*
            };
        }
        collect!(
            k, r, iterations, epochs_per_iteration, batch_size, lr, lr_milestones, momentum,
            weight_decay, alpha, beta, n_e, l, epsilon, seed, v_passes, srem, normalized, q_factor,
            backbone_channels, grad_clip, center_hash, balanced_init, balanced_v
        );
        out
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file from `generate-data`.
    #[arg(long)]
    data: PathBuf,
    /// JSON file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Write this many first-iteration erasing masks under `<out>/masks`.
    #[arg(long)]
    dump_masks: Option<usize>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BuildDbArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    db: PathBuf,
    /// Dataset id of the image to query with.
    #[arg(long)]
    id: usize,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    db: PathBuf,
    /// Retrieval cutoff; the default ranks the whole database.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset file; generated with default settings when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// One or two axes, e.g. `n_e=2,8,16 l=3,5,9`.
    #[arg(long, num_args = 1..=2, required = true)]
    grid: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Runs the command line; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            eprint!("{}", e.render());
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Dimension(_) | Error::Io(_) => 3,
        _ => 2,
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(a) => generate_data(a),
        Command::Train(a) => train_cmd(a),
        Command::BuildDb(a) => build_db(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Layers a JSON object file and then flag overrides over `defaults`.
/// Unknown keys are rejected and type errors name the offending key.
fn merge_config<T: Serialize + DeserializeOwned>(
    defaults: &T,
    path: Option<&Path>,
    overrides: &[(String, Value)],
) -> Result<T> {
    let mut current = serde_json::to_value(defaults)?;
    let known: Vec<String> = current.as_object().map(|m| m.keys().cloned().collect()).unwrap_or_default();
    let mut layers: Vec<(String, Value)> = Vec::new();
    if let Some(path) = path {
        let text = std::fs::read_to_string(input(path, "config")?)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(Error::config("config", "must be a JSON object"));
        };
        layers.extend(map);
    }
    layers.extend(overrides.iter().cloned());
    for (key, value) in layers {
        if !known.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        current[&key] = value;
        serde_json::from_value::<T>(current.clone()).map_err(|e| Error::config(&key, e.to_string()))?;
    }
    Ok(serde_json::from_value(current)?)
}

/// Resolves and validates a training configuration.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<TrainConfig> {
    let config: TrainConfig = merge_config(&TrainConfig::default(), path, overrides)?;
    config.validate()?;
    Ok(config)
}

fn input<'a>(path: &'a Path, flag: &str) -> Result<&'a Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::config(flag, format!("no such file: {}", path.display())))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Hash of everything that determines a run's outputs.
fn config_hash(settings: &Value) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(settings)?))
}

#[derive(Serialize)]
struct Manifest {
    verb: &'static str,
    version: &'static str,
    config_hash: String,
    seed: u64,
    artifact_paths: Vec<String>,
    started_at: String,
    finished_at: String,
}

struct Run {
    verb: &'static str,
    out: PathBuf,
    started_at: String,
    artifacts: Vec<String>,
}

impl Run {
    fn start(verb: &'static str, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Self {
            verb,
            out: out.to_path_buf(),
            started_at: chrono::Utc::now().to_rfc3339(),
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push(p.display().to_string());
        p
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, bytes)?;
        Ok(p)
    }

    fn finish(self, settings: &Value, seed: u64) -> Result<()> {
        let manifest = Manifest {
            verb: self.verb,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: config_hash(settings)?,
            seed,
            artifact_paths: self.artifacts,
            started_at: self.started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
        };
        std::fs::write(self.out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

fn generate_data(a: GenerateArgs) -> Result<()> {
    let mut overrides = Vec::new();
    macro_rules! collect {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field {
                overrides.push((stringify!($field).to_string(), json!(v)));
            })*
        };
    }
    collect!(classes, per_class, height, width, query_fraction, motif_size, backgrounds, noise);
    let config: GenConfig = merge_config(&GenConfig::default(), a.config.as_deref(), &overrides)?;
    let dataset = generate(&config, a.seed)?;
    let mut run = Run::start("generate-data", &a.out)?;
    let path = run.path("dataset.fghd");
    dataset.save(&path)?;
    println!(
        "wrote {} ({} images, {} classes, {} queries)",
        path.display(),
        dataset.len(),
        dataset.class_count(),
        dataset.query_ids().len()
    );
    run.finish(&json!({"verb": "generate-data", "config": config, "seed": a.seed}), a.seed)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = parse_config(a.config.as_deref(), &a.overrides.pairs())?;
    let data_path = input(&a.data, "data")?;
    let dataset = Dataset::load(data_path)?;
    let mut run = Run::start("train", &a.out)?;
    let options = TrainOptions {
        mask_dump: a.dump_masks.map(|n| (a.out.join("masks"), n)),
    };
    let outcome = train(&dataset, &config, &options)?;
    outcome.model.save(run.path("checkpoint.fghc"))?;
    CodeDatabase::new(outcome.v, dataset.database_labels())?.save(run.path("database.fghv"))?;
    run.write("train_log.csv", log_to_csv(&outcome.log))?;
    run.write("config.json", serde_json::to_vec_pretty(&config)?)?;
    if options.mask_dump.is_some() {
        run.artifacts.push(a.out.join("masks").display().to_string());
    }
    if let Some(last) = outcome.log.last() {
        println!("final epoch loss {:.6} (l_sq {:.6})", last.total, last.l_sq);
    }
    let settings = json!({"verb": "train", "config": config, "data": file_hash(data_path)?});
    run.finish(&settings, config.seed)
}

fn load_model_and_data(data: &Path, checkpoint: &Path) -> Result<(Dataset, Model)> {
    let dataset = Dataset::load(input(data, "data")?)?;
    let model = Model::load(input(checkpoint, "checkpoint")?)?;
    Ok((dataset, model))
}

fn build_db(a: BuildDbArgs) -> Result<()> {
    let (dataset, model) = load_model_and_data(&a.data, &a.checkpoint)?;
    let ids = dataset.train_ids();
    let codes = eval::encode_images(&model, &dataset, &ids)?;
    let mut run = Run::start("build-db", &a.out)?;
    CodeDatabase::new(codes, dataset.database_labels())?.save(run.path("database.fghv"))?;
    println!("encoded {} database images", ids.len());
    let settings = json!({
        "verb": "build-db",
        "data": file_hash(&a.data)?,
        "checkpoint": file_hash(&a.checkpoint)?,
    });
    run.finish(&settings, dataset.seed)
}

fn load_index(db: &Path) -> Result<HammingIndex> {
    Ok(HammingIndex::from_database(CodeDatabase::load(input(db, "db")?)?))
}

fn query(a: QueryArgs) -> Result<()> {
    let (dataset, model) = load_model_and_data(&a.data, &a.checkpoint)?;
    let index = load_index(&a.db)?;
    if a.id >= dataset.len() {
        return Err(Error::config("id", format!("image {} outside dataset of {}", a.id, dataset.len())));
    }
    let code = model.code(&dataset.image(a.id))?;
    let report = neighbor_report(&index, &code, Some(dataset.labels[a.id]), a.top)?;
    print!("{report}");
    let mut run = Run::start("query", &a.out)?;
    run.write("query.csv", &report)?;
    let settings = json!({
        "verb": "query",
        "data": file_hash(&a.data)?,
        "checkpoint": file_hash(&a.checkpoint)?,
        "db": file_hash(&a.db)?,
        "id": a.id,
        "top": a.top,
    });
    run.finish(&settings, dataset.seed)
}

#[derive(Serialize)]
struct Summary {
    map: f64,
    p_at_10: f64,
    cutoff: usize,
    queries: usize,
    config_hash: String,
    seeds: Value,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (dataset, model) = load_model_and_data(&a.data, &a.checkpoint)?;
    let index = load_index(&a.db)?;
    let report = evaluate(&index, &model, &dataset, a.top)?;
    let settings = json!({
        "verb": "eval",
        "data": file_hash(&a.data)?,
        "checkpoint": file_hash(&a.checkpoint)?,
        "db": file_hash(&a.db)?,
        "top": a.top,
    });
    let summary = Summary {
        map: report.map,
        p_at_10: report.mean_p_at_10,
        cutoff: report.cutoff,
        queries: report.queries.len(),
        config_hash: config_hash(&settings)?,
        seeds: json!({"dataset": dataset.seed}),
    };
    let mut run = Run::start("eval", &a.out)?;
    run.write("results.csv", report.to_csv())?;
    run.write("summary.json", serde_json::to_vec_pretty(&summary)?)?;
    println!("MAP {:.4}  precision@10 {:.4}  ({} queries)", report.map, report.mean_p_at_10, report.queries.len());
    run.finish(&settings, dataset.seed)
}

/// `key=v1,v2,...` into the key and its JSON values.
fn parse_axis(spec: &str) -> Result<(String, Vec<Value>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("grid", format!("expected key=v1,v2,..., got `{spec}`")))?;
    let values = values
        .split(',')
        .filter(|v| !v.is_empty())
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect::<Vec<_>>();
    if values.is_empty() {
        return Err(Error::config("grid", format!("axis `{key}` has no values")));
    }
    Ok((key.to_string(), values))
}

fn cell_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let axes = a.grid.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>>>()?;
    let base = a.overrides.pairs();
    let base_config = parse_config(a.config.as_deref(), &base)?;
    let (dataset, data_tag) = match &a.data {
        Some(p) => (Dataset::load(input(p, "data")?)?, json!(file_hash(p)?)),
        None => {
            let d = generate(&GenConfig::default(), base_config.seed)?;
            (d, json!({"generated": GenConfig::default(), "seed": base_config.seed}))
        }
    };

    let rows: Vec<Value> = axes[0].1.clone();
    let cols: Vec<Option<Value>> = match axes.get(1) {
        Some((_, values)) => values.iter().cloned().map(Some).collect(),
        None => vec![None],
    };
    let mut table = vec![vec![0.0; cols.len()]; rows.len()];
    for (i, rv) in rows.iter().enumerate() {
        for (j, cv) in cols.iter().enumerate() {
            let mut pairs = base.clone();
            pairs.push((axes[0].0.clone(), rv.clone()));
            if let (Some((key, _)), Some(cv)) = (axes.get(1), cv) {
                pairs.push((key.clone(), cv.clone()));
            }
            let config = parse_config(a.config.as_deref(), &pairs)?;
            let outcome = train(&dataset, &config, &TrainOptions::default())?;
            let index = HammingIndex::build(outcome.v, dataset.database_labels())?;
            table[i][j] = evaluate(&index, &outcome.model, &dataset, None)?.map;
            println!("{}={} {} MAP {:.4}", axes[0].0, cell_label(rv), cv.as_ref().map_or(String::new(), |c| {
                format!("{}={}", axes[1].0, cell_label(c))
            }), table[i][j]);
        }
    }

    let mut csv = match axes.get(1) {
        Some((key, values)) => {
            let head: Vec<String> = values.iter().map(cell_label).collect();
            format!("{}\\{},{}\n", axes[0].0, key, head.join(","))
        }
        None => format!("{},map\n", axes[0].0),
    };
    for (rv, row) in rows.iter().zip(&table) {
        let cells: Vec<String> = row.iter().map(|m| m.to_string()).collect();
        csv.push_str(&format!("{},{}\n", cell_label(rv), cells.join(",")));
    }
    let mut run = Run::start("ablate", &a.out)?;
    run.write("ablation.csv", csv)?;
    let settings = json!({
        "verb": "ablate",
        "config": base_config,
        "grid": a.grid,
        "data": data_tag,
    });
    run.finish(&settings, base_config.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(list: &[(&str, Value)]) -> Vec<(String, Value)> {
        list.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn empty_object_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "{}").unwrap();
        assert_eq!(parse_config(Some(&p), &[]).unwrap(), TrainConfig::default());
    }

    #[test]
    fn flag_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"lr": 0.5, "k": 24}"#).unwrap();
        let c = parse_config(Some(&p), &pairs(&[("lr", json!(0.01))])).unwrap();
        assert_eq!((c.lr, c.k), (0.01, 24));
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |e: Error| match e {
            Error::Config { key, .. } => key,
            other => panic!("unexpected {other}"),
        };
        assert_eq!(key_of(parse_config(None, &pairs(&[("k", json!(-3))])).unwrap_err()), "k");
        assert_eq!(key_of(parse_config(None, &pairs(&[("k", json!(0))])).unwrap_err()), "k");
        assert_eq!(key_of(parse_config(None, &pairs(&[("gamma", json!(1))])).unwrap_err()), "gamma");
    }

    #[test]
    fn axis_parsing() {
        let (k, v) = parse_axis("n_e=2,8,16").unwrap();
        assert_eq!((k.as_str(), v), ("n_e", vec![json!(2), json!(8), json!(16)]));
        assert!(parse_axis("n_e").is_err());
        assert!(parse_axis("n_e=").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["erasehash", "frobnicate"]), 1);
        assert_eq!(run(["erasehash"]), 1);
        assert_eq!(run(["erasehash", "train"]), 1);
    }

    #[test]
    fn missing_inputs_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["erasehash", "train", "--data", "/nonexistent.fghd", "--out", out]), 2);
    }
}
