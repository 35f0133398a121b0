//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or input error, 3
//! numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::check::{check_names, run_gradcheck, TOLERANCE};
use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{compute_ap, gt_instances};
use crate::inference::{attention_table, rank_and_emit, EmitConfig, PredictionFile};
use crate::scene::{generate_scene_set, load_scene, save_scene, Scene, SceneSetSpec};
use crate::tensor::GradCheckError;
use crate::train::{history_tsv, load_checkpoint, save_checkpoint, train, OptimizerKind, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "spformer",
    version,
    about = "Superpoint-transformer 3D instance segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on generated or loaded scenes and write a checkpoint.
    Train(TrainArgs),
    /// Predict instances for one scene file or every scene in a directory.
    Infer(InferArgs),
    /// Score prediction files against ground-truth scenes.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with [train], [model], [loss] and [data] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on the scene files in this directory instead of generating them.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene file, or a directory of `.json` scene files.
    pub scene: PathBuf,
    /// Output directory for prediction files and attention tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Drop predictions whose final score is below this value.
    #[arg(long, default_value_t = 0.0)]
    pub score_floor: f64,
    /// Keep at most this many predictions per scene.
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Also write one cross-attention table per decoder layer.
    #[arg(long)]
    pub dump_attention: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of prediction files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of scene files with ground truth.
    #[arg(long)]
    pub gt: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Scale the analytic gradient of the named check, as a negative control.
    #[arg(long, hide = true)]
    pub corrupt_kernel: Option<String>,
}

/// Training settings as laid out in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
}

/// On-disk config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub train: TrainSection,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: SceneSetSpec,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from(&TrainConfig::default())
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        ConfigFile::default().train
    }
}

impl From<&TrainConfig> for ConfigFile {
    fn from(c: &TrainConfig) -> Self {
        Self {
            train: TrainSection {
                seed: c.seed,
                lr: c.lr,
                steps: c.steps,
                optimizer: c.optimizer,
            },
            model: c.model.clone(),
            loss: c.loss.clone(),
            data: c.data.clone(),
        }
    }
}

impl From<ConfigFile> for TrainConfig {
    fn from(f: ConfigFile) -> Self {
        Self {
            seed: f.train.seed,
            lr: f.train.lr,
            steps: f.train.steps,
            optimizer: f.train.optimizer,
            model: f.model,
            loss: f.loss,
            data: f.data,
        }
    }
}

/// Resolved config as TOML.
pub fn config_to_toml(config: &TrainConfig) -> String {
    toml::to_string(&ConfigFile::from(config)).expect("config serializes to TOML")
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {raw:?} has an empty key segment")));
    }
    let value = value.trim();
    // Bare words that are not TOML literals are taken as strings.
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config(format!(
                    "override key {} crosses a non-table value",
                    path.join(".")
                )))
            }
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Builds the training config from an optional file, `key=value`
/// overrides, and an optional seed, in increasing precedence. Unknown keys
/// are rejected.
pub fn resolve_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let origin = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("<overrides>"));
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Parse {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?
        }
        None => toml::Table::new(),
    };
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        apply_override(&mut table, &key, value)?;
    }
    let file: ConfigFile = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Parse {
            path: origin,
            message: e.to_string(),
        })?;
    let mut config = TrainConfig::from(file);
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `.json` files of a directory sorted by name.
fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn scene_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Scenes of a file or directory, keyed by file stem.
fn load_scenes(path: &Path) -> Result<Vec<(String, Scene)>> {
    let files = if path.is_dir() {
        json_files(path)?
    } else {
        vec![path.to_path_buf()]
    };
    files.iter().map(|f| Ok((scene_id(f), load_scene(f)?))).collect()
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = resolve_config(args.config.as_deref(), &args.overrides, args.seed)?;
    let resolved = config_to_toml(&config);
    eprintln!("resolved config:\n{resolved}");
    let scenes: Vec<Scene> = match &args.scenes {
        Some(dir) => {
            let loaded = load_scenes(dir)?;
            if loaded.is_empty() {
                return Err(Error::Validation(format!("no scene files in {}", dir.display())));
            }
            loaded.into_iter().map(|(_, s)| s).collect()
        }
        None => generate_scene_set(config.seed, &config.data)?,
    };
    create_dir(&args.out)?;
    write_file(&args.out.join("config.toml"), &resolved)?;
    if args.scenes.is_none() {
        let dir = args.out.join("scenes");
        create_dir(&dir)?;
        for (i, scene) in scenes.iter().enumerate() {
            save_scene(scene, dir.join(format!("scene_{i:03}.json")))?;
        }
    }
    let outcome = train(&config, &scenes)?;
    write_file(&args.out.join("loss_history.tsv"), &history_tsv(&outcome.history))?;
    save_checkpoint(&outcome.checkpoint(&config), args.out.join("checkpoint.json"))?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        eprintln!(
            "trained {} steps: total loss {:.6} -> {:.6}",
            outcome.history.len(),
            first.values.total,
            last.values.total
        );
    }
    Ok(())
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.to_model()?;
    let emit = EmitConfig {
        score_floor: args.score_floor,
        top_n: args.top_n,
    };
    let scenes = load_scenes(&args.scene)?;
    create_dir(&args.out)?;
    for (id, scene) in &scenes {
        let inference = model.infer(scene)?;
        let last = inference.predictions.last().expect("at least the initial head");
        let file = PredictionFile {
            scene: id.clone(),
            instances: rank_and_emit(last, &scene.partition, &emit),
        };
        file.save(args.out.join(format!("{id}.json")))?;
        if args.dump_attention {
            for (l, weights) in inference.cross_attention.iter().enumerate() {
                let table = attention_table(l + 1, weights, &scene.partition);
                write_file(&args.out.join(format!("{id}.attention.layer{}.tsv", l + 1)), &table)?;
            }
        }
        eprintln!("{id}: {} instances", file.instances.len());
    }
    Ok(())
}

/// Report of the predictions in `pred` against the scenes in `gt`. A
/// ground-truth scene without a prediction file counts as predicting
/// nothing; a prediction file without a ground-truth scene is an error.
pub fn evaluate_dirs(pred: &Path, gt: &Path) -> Result<String> {
    let gt_scenes = load_scenes(gt)?;
    let mut predictions: BTreeMap<String, PredictionFile> = BTreeMap::new();
    for f in json_files(pred)? {
        let p = PredictionFile::load(&f)?;
        if predictions.contains_key(&p.scene) {
            return Err(Error::Validation(format!(
                "scene {} has more than one prediction file",
                p.scene
            )));
        }
        predictions.insert(p.scene.clone(), p);
    }
    let known: Vec<&str> = gt_scenes.iter().map(|(id, _)| id.as_str()).collect();
    let missing: Vec<&str> = predictions
        .keys()
        .map(String::as_str)
        .filter(|k| !known.contains(k))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "predictions without a ground-truth scene: {}",
            missing.join(", ")
        )));
    }
    let mut preds = Vec::with_capacity(gt_scenes.len());
    let mut gts = Vec::with_capacity(gt_scenes.len());
    for (id, scene) in &gt_scenes {
        gts.push(gt_instances(scene)?);
        preds.push(predictions.remove(id).map(|p| p.instances).unwrap_or_default());
    }
    Ok(compute_ap(&preds, &gts).report())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let report = evaluate_dirs(&args.pred, &args.gt)?;
    print!("{report}");
    if let Some(out) = &args.out {
        write_file(out, &report)?;
    }
    Ok(())
}

/// Runs the gradient checks, prints one line per check, and returns the
/// exit code.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> i32 {
    if let Some(name) = &args.corrupt_kernel {
        if !check_names().contains(&name.as_str()) {
            eprintln!("error: no check named {name}");
            return EXIT_USAGE;
        }
    }
    let outcomes = match run_gradcheck(args.seed, args.corrupt_kernel.as_deref()) {
        Ok(o) => o,
        Err(GradCheckError::Eval(e)) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_NUMERICAL;
        }
    };
    println!("check\tmax_rel_err\tchecked\tskipped\tresult");
    for o in &outcomes {
        let verdict = if o.passed() { "ok" } else { "FAIL" };
        println!(
            "{}\t{:.3e}\t{}\t{}\t{verdict}",
            o.name, o.max_rel_err, o.entries, o.skipped
        );
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    if failed.is_empty() {
        EXIT_OK
    } else {
        eprintln!("gradcheck failed (tolerance {TOLERANCE:e}): {}", failed.join(", "));
        EXIT_CHECK_FAILED
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => return cmd_gradcheck(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` and runs the command. Usage errors exit with 2, help and
/// version with 0.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
