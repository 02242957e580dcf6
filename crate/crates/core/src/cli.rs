//! Command-line front end: data generation, training, evaluation and
//! geometry analysis. Machine-readable results go to stdout as one JSON line;
//! logs go to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    expand_prompts, generate, generate_nli, load_classes, load_nli, load_pairs, load_prompts,
    save_classes, save_nli, save_pairs, GenSpec, NliRecord, PairedRecord,
};
use crate::error::{Error, Result};
use crate::geometry::{geometry_csv, geometry_report, GeometryRow};
use crate::io::{read_json, to_jsonl, write_atomic, write_json};
use crate::model::DualEncoder;
use crate::objectives::Variant;
use crate::retrieval::{zero_shot_classify, ZeroShotReport};
use crate::trainer::{train, EvalEntry, TrainConfig, TrainingSet, Validator};

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const NLI_FILE: &str = "nli.jsonl";
pub const CLASSES_FILE: &str = "classes.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PROMPTS_FILE: &str = "prompts.txt";
pub const SPEC_FILE: &str = "gen_spec.json";

const DEFAULT_PROMPTS: &str = "\
# One template per line; {label} is replaced by the class name.
a photo of a {label}
a blurry photo of a {label}
a sound of {label}
{label}
";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const MISSING_INPUT: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

/// Maps an error to the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingInput(_) => exit::MISSING_INPUT,
        Error::NonFinite { .. } | Error::ZeroRow(_) => exit::NUMERIC,
        _ => exit::CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sentalign",
    version,
    about = "Contrastive dual-encoder training with sentence objectives"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset, NLI triples and prompt files.
    Gen(GenArgs),
    /// Train one objective variant and write a run directory.
    Train(TrainArgs),
    /// Retrieval (and optionally zero-shot) evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Geometry diagnostics for one or more checkpoints, written as CSV.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON generation spec; omitted fields take their defaults.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's objective variant.
    #[arg(long)]
    pub variant: Option<String>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Prompt template file; enables zero-shot classification.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command and prints its JSON result line.
pub fn run(cli: Cli) -> Result<()> {
    let value = match cli.command {
        Command::Gen(a) => cmd_gen(&a)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Analyze(a) => cmd_analyze(&a)?,
    };
    println!("{value}");
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput(format!(
            "{what} not found at {}",
            path.display()
        )))
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    require(path, what)?;
    read_json(path)
}

pub fn cmd_gen(args: &GenArgs) -> Result<serde_json::Value> {
    let spec: GenSpec = read_config(&args.spec, "generation spec")?;
    spec.validate()?;
    let data = generate(&spec)?;
    let nli = generate_nli(&spec, &data.train)?;
    let out = &args.out;
    save_pairs(&out.join(PAIRS_FILE), &data.train)?;
    save_pairs(&out.join(VAL_FILE), &data.val)?;
    save_nli(&out.join(NLI_FILE), &nli)?;
    save_classes(&out.join(CLASSES_FILE), &data.classes)?;
    data.vocab.save(&out.join(VOCAB_FILE))?;
    write_atomic(&out.join(PROMPTS_FILE), DEFAULT_PROMPTS.as_bytes())?;
    write_json(&out.join(SPEC_FILE), &spec)?;

    let mut per_class: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
    for (split, records) in [&data.train, &data.val].into_iter().enumerate() {
        for r in records {
            if let Some(label) = &r.class_label {
                per_class.entry(label.as_str()).or_default()[split] += 1;
            }
        }
    }
    let per_class: BTreeMap<&str, serde_json::Value> = per_class
        .into_iter()
        .map(|(k, [t, v])| (k, json!({"train": t, "val": v})))
        .collect();
    log::info!(
        "wrote {} train, {} val, {} NLI records to {}",
        data.train.len(),
        data.val.len(),
        nli.len(),
        out.display()
    );
    Ok(json!({
        "train": data.train.len(),
        "val": data.val.len(),
        "nli": nli.len(),
        "classes": data.classes.len(),
        "per_class": per_class,
    }))
}

/// Everything a run directory's manifest records.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: TrainConfig,
    pub data_dir: PathBuf,
    pub gen_spec: Option<PathBuf>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub tool_version: String,
    pub started_unix_secs: u64,
    pub wall_seconds: f64,
}

struct DataDir {
    train: Vec<PairedRecord>,
    val: Vec<PairedRecord>,
    nli: Option<Vec<NliRecord>>,
}

fn load_data_dir(dir: &Path) -> Result<DataDir> {
    let pairs = dir.join(PAIRS_FILE);
    let val = dir.join(VAL_FILE);
    require(&pairs, "training pairs")?;
    require(&val, "validation pairs")?;
    let nli = dir.join(NLI_FILE);
    Ok(DataDir {
        train: load_pairs(&pairs)?,
        val: load_pairs(&val)?,
        nli: if nli.is_file() {
            Some(load_nli(&nli)?)
        } else {
            None
        },
    })
}

pub fn run_id(config: &TrainConfig) -> String {
    format!("{}-seed{}", config.objective.variant, config.seed)
}

pub fn cmd_train(args: &TrainArgs) -> Result<serde_json::Value> {
    let started = Instant::now();
    let started_unix_secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut config: TrainConfig = read_config(&args.config, "training config")?;
    if let Some(v) = &args.variant {
        let variant: Variant = v.parse()?;
        config.objective = config.objective.with_variant(variant);
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let config = config.resolved();
    config.validate()?;
    if config.objective.variant.needs_nli_file() {
        require(&args.data.join(NLI_FILE), "NLI corpus")?;
    }
    let data = load_data_dir(&args.data)?;
    let vocab_path = args.data.join(VOCAB_FILE);
    require(&vocab_path, "vocabulary")?;
    let set = TrainingSet {
        pairs: data.train,
        nli: data.nli,
        vocab: crate::data::Vocab::load(&vocab_path)?,
    };

    let id = run_id(&config);
    log::info!("training {id} on {} pairs", set.pairs.len());
    let outcome = train(&config, &set, &data.val)?;

    let out = &args.out;
    let artifacts: BTreeMap<String, PathBuf> = [
        ("config", "config.json"),
        ("history", "history.jsonl"),
        ("train_log", "train_log.jsonl"),
        ("best_checkpoint", "best.ckpt.json"),
        ("final_checkpoint", "final.ckpt.json"),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), out.join(f)))
    .collect();
    write_json(&artifacts["config"], &config)?;
    write_atomic(
        &artifacts["history"],
        to_jsonl(&outcome.history)?.as_bytes(),
    )?;
    write_atomic(&artifacts["train_log"], to_jsonl(&outcome.log)?.as_bytes())?;
    outcome.best.save(&artifacts["best_checkpoint"])?;
    outcome.final_model.save(&artifacts["final_checkpoint"])?;
    let spec_path = args.data.join(SPEC_FILE);
    let manifest = RunManifest {
        run_id: id.clone(),
        config: config.clone(),
        data_dir: args.data.clone(),
        gen_spec: spec_path.is_file().then_some(spec_path),
        artifacts,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_secs,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    let best = outcome.best_entry.as_ref().map(entry_summary);
    let last = outcome.history.last().map(entry_summary);
    log::info!("finished {id} after {} steps", outcome.total_steps);
    Ok(json!({
        "run_id": id,
        "variant": config.objective.variant,
        "seed": config.seed,
        "steps": outcome.total_steps,
        "best": best,
        "final": last,
    }))
}

fn entry_summary(e: &EvalEntry) -> serde_json::Value {
    json!({
        "step": e.step,
        "epoch": e.epoch,
        "score": e.score,
        "text_retrieval": e.text_retrieval,
        "other_retrieval": e.other_retrieval,
    })
}

fn load_model(path: &Path) -> Result<DualEncoder> {
    require(path, "checkpoint")?;
    DualEncoder::load(path)
}

fn check_dims(model: &DualEncoder, records: &[PairedRecord]) -> Result<()> {
    if let Some(r) = records.first() {
        model.check_feature_dim(r.features.len())?;
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<serde_json::Value> {
    let model = load_model(&args.ckpt)?;
    let val_path = args.data.join(VAL_FILE);
    require(&val_path, "validation pairs")?;
    let val = load_pairs(&val_path)?;
    check_dims(&model, &val)?;
    let (t, o, score) = Validator::new(&model, &val)?.evaluate(&model)?;
    let mut out = json!({
        "text_retrieval": t,
        "other_retrieval": o,
        "score": score,
    });

    if let Some(prompts_path) = &args.prompts {
        require(prompts_path, "prompt file")?;
        let templates = load_prompts(prompts_path)?;
        let classes_path = args.data.join(CLASSES_FILE);
        require(&classes_path, "class list")?;
        let classes = load_classes(&classes_path)?;
        let labels = val
            .iter()
            .map(|r| {
                let label = r.class_label.as_deref().ok_or_else(|| {
                    Error::MissingInput(format!("record {} has no class_label", r.id))
                })?;
                classes.iter().position(|c| c == label).ok_or_else(|| {
                    Error::config("class_label", format!("{label:?} is not in {CLASSES_FILE}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let class_prompts = expand_prompts(&templates, &classes)
            .iter()
            .map(|texts| model.embed_text(&model.tokenize_known(texts)?))
            .collect::<Result<Vec<_>>>()?;
        let items = model.embed_other(&crate::data::feature_matrix(&val)?)?;
        let zs = zero_shot_classify(&items, &class_prompts, Some(&labels))?;
        out["zero_shot"] = serde_json::to_value(ZeroShotReport {
            accuracy: zs.accuracy.unwrap_or(0.0),
            n_items: val.len(),
            n_classes: classes.len(),
            prompts_per_class: templates.len(),
        })?;
    }
    Ok(out)
}

/// `(run_id, variant, seed)` from the `config.json` next to a checkpoint,
/// falling back to the checkpoint's file name.
fn run_identity(ckpt: &Path) -> (String, String, u64) {
    let config = ckpt
        .parent()
        .map(|d| d.join("config.json"))
        .filter(|p| p.is_file())
        .and_then(|p| read_json::<TrainConfig>(&p).ok());
    let stem = ckpt
        .file_name()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    match config {
        Some(c) => (
            format!("{}/{stem}", run_id(&c)),
            c.objective.variant.to_string(),
            c.seed,
        ),
        None => (stem, "unknown".to_string(), 0),
    }
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<serde_json::Value> {
    let data = load_data_dir(&args.data)?;
    let mut records = data.train;
    records.extend(data.val);
    let mut rows = Vec::with_capacity(args.ckpt.len());
    for path in &args.ckpt {
        let model = load_model(path)?;
        check_dims(&model, &records)?;
        let (text, other) = model.embed_records(&records)?;
        let report = geometry_report(&text, &other)?;
        let (id, variant, seed) = run_identity(path);
        rows.push(GeometryRow::new(id, variant, seed, &report));
    }
    write_atomic(&args.out, geometry_csv(&rows)?.as_bytes())?;
    Ok(json!({"rows": rows.len(), "out": args.out}))
}
