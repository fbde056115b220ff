//! Command-line front end: `generate`, `train`, `evaluate`, `predict` and
//! `report`.
//!
//! Values are resolved as defaults < `--config` TOML file < flags. Every run
//! writes the resolved configuration next to its outputs; feeding that file
//! back through `--config` repeats the run.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{read_report, sliced_report, CompiledModel, ROUTES_FILE, SINGLE_CHECKPOINT};
use crate::model::{
    class_probabilities, file_sha256, save_checkpoint, Checkpoint, ModelCard, ModelConfig, ModelParams,
    PositionalEncoding, Task,
};
use crate::train::{
    curriculum_bins, curriculum_train, kfold_validate, train_once, BinData, LengthBin, OptimizerKind, TrainConfig,
    TrainHistory,
};
use crate::trajgen::{
    build_dataset, build_grid, normalize_positions, parse_trajectory_line, read_dataset, evaluation_lengths, Balance,
    DatasetSpec, DiffusionModel, GridSpec, Split, SplitFractions, MIN_LENGTH,
};

pub const THREADS_ENV: &str = "CONVTRANS_THREADS";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "convtrans", version, about = "Anomalous-diffusion trajectories and the ConvTransformer")]
pub struct Cli {
    /// Worker thread cap (default: all cores)
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// TOML run configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Global seed for data generation, initialization and shuffling
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a labelled dataset or an evaluation grid
    Generate(GenerateArgs),
    /// Train a model (single run, k-fold or length curriculum)
    Train(TrainArgs),
    /// Score checkpoints on a test grid and write reports and plots
    Evaluate(EvaluateArgs),
    /// Predict for every line of a trajectory file
    Predict(PredictArgs),
    /// Re-render summary, slices, confusion tables and plots of an evaluation directory
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Comma-separated model names or codes (ATTM,CTRW,FBM,LW,SBM)
    #[arg(long)]
    pub models: Option<String>,
    /// Comma-separated α grid (default 0.05..1.95 in steps of 0.05)
    #[arg(long)]
    pub alphas: Option<String>,
    /// Length range `lo:hi`, or a comma-separated list for --grid
    #[arg(long)]
    pub lengths: Option<String>,
    /// Comma-separated SNR values; `none` for noiseless
    #[arg(long)]
    pub snr: Option<String>,
    /// Number of trajectories
    #[arg(long)]
    pub count: Option<usize>,
    /// Build the (model × length × SNR × α) evaluation grid instead
    #[arg(long)]
    pub grid: bool,
    /// Trajectories per grid cell
    #[arg(long)]
    pub cell_size: Option<usize>,
    /// Stratification: `strata` (every (model, α) equally) or `models`
    #[arg(long)]
    pub balance: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `alpha` (regression) or `model` (classification)
    #[arg(long)]
    pub task: Option<String>,
    /// Dataset manifest.json
    #[arg(long, value_name = "MANIFEST")]
    pub data: Option<PathBuf>,
    /// Length-bin curriculum with parameter inheritance
    #[arg(long)]
    pub curriculum: bool,
    /// Curriculum bins `lo-hi,lo-hi,...` (default: the twelve standard bins)
    #[arg(long)]
    pub bins: Option<String>,
    /// k-fold validation instead of a single run
    #[arg(long, value_name = "K")]
    pub kfold: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `adam` or `sgd`
    #[arg(long)]
    pub optimizer: Option<String>,
    /// `off` or `sinusoidal`
    #[arg(long)]
    pub positional_encoding: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// `alpha` or `model`; must match the checkpoints
    #[arg(long)]
    pub task: Option<String>,
    /// Directory with model.ckpt or compiled.csv
    #[arg(long, value_name = "DIR")]
    pub checkpoints: Option<PathBuf>,
    /// Test grid manifest.json
    #[arg(long, value_name = "MANIFEST")]
    pub grid: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory with model.ckpt or compiled.csv
    #[arg(long, value_name = "DIR")]
    pub checkpoints: Option<PathBuf>,
    /// Trajectory file (`id,L,p0,...`)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Predictions file; errors go to `<out>.errors.csv`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation directory written by `evaluate`
    #[arg(long, value_name = "DIR")]
    pub eval: Option<PathBuf>,
    /// Output directory (default: the evaluation directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub models: Vec<DiffusionModel>,
    pub alphas: Option<Vec<f64>>,
    pub length_min: usize,
    pub length_max: usize,
    /// Grid lengths.
    pub lengths: Option<Vec<usize>>,
    pub snr: Vec<f64>,
    pub count: usize,
    pub grid: bool,
    pub cell_size: usize,
    pub balance: Balance,
    pub split: SplitFractions,
    pub out: Option<PathBuf>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            models: DiffusionModel::ALL.to_vec(),
            alphas: None,
            length_min: MIN_LENGTH,
            length_max: 1000,
            lengths: None,
            snr: Vec::new(),
            count: 1000,
            grid: false,
            cell_size: 2000,
            balance: Balance::Strata,
            split: SplitFractions::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub curriculum: bool,
    pub bins: Option<Vec<(usize, usize)>>,
    pub kfold: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub checkpoints: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub checkpoints: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub eval: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run depends on. `hyper.seed` is always the global seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Echo only; the subcommand always comes from the command line.
    pub command: Option<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub generate: GenerateConfig,
    pub train: TrainSection,
    pub hyper: TrainConfig,
    pub model: ModelConfig,
    pub evaluate: EvaluateSection,
    pub predict: PredictSection,
    pub report: ReportSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Model config: the `[model]` table with heads, dropouts and head size
    /// taken from the training hyper-parameters.
    pub fn model_config(&self) -> ModelConfig {
        let t = self.hyper.model_config();
        ModelConfig {
            heads: t.heads,
            cnn_dropout: t.cnn_dropout,
            trans_dropout: t.trans_dropout,
            head_out: t.head_out,
            ..self.model.clone()
        }
    }
}

/// Failure of a CLI run: exit code plus the one-line message.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub class: String,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            class: "usage".into(),
            message: message.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.class, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: EXIT_FAILURE,
            class: e.class().into(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> CliResult<Vec<T>> {
    split_list(s)
        .map(|x| x.parse().map_err(|_| CliError::usage(format!("--{flag}: cannot parse '{x}'"))))
        .collect()
}

fn parse_task(s: &str) -> CliResult<Task> {
    match s.trim().to_ascii_lowercase().as_str() {
        "alpha" | "regression" | "1" => Ok(Task::Alpha),
        "model" | "classification" | "2" => Ok(Task::Model),
        other => Err(CliError::usage(format!("unknown task '{other}' (alpha or model)"))),
    }
}

fn parse_bins(s: &str) -> CliResult<Vec<(usize, usize)>> {
    split_list(s)
        .map(|b| {
            let (lo, hi) = b
                .split_once('-')
                .ok_or_else(|| CliError::usage(format!("--bins: expected lo-hi, got '{b}'")))?;
            let lo = lo.trim().parse().map_err(|_| CliError::usage(format!("--bins: bad '{b}'")))?;
            let hi = hi.trim().parse().map_err(|_| CliError::usage(format!("--bins: bad '{b}'")))?;
            Ok((lo, hi))
        })
        .collect()
}

fn apply_generate(g: &mut GenerateConfig, a: &GenerateArgs) -> CliResult<()> {
    if let Some(m) = &a.models {
        g.models = split_list(m).map(str::parse).collect::<Result<_>>().map_err(|e| CliError::usage(e.to_string()))?;
    }
    if let Some(s) = &a.alphas {
        g.alphas = Some(parse_list("alphas", s)?);
    }
    if let Some(l) = &a.lengths {
        if let Some((lo, hi)) = l.split_once(':') {
            g.length_min = lo.trim().parse().map_err(|_| CliError::usage(format!("--lengths: bad '{l}'")))?;
            g.length_max = hi.trim().parse().map_err(|_| CliError::usage(format!("--lengths: bad '{l}'")))?;
            g.lengths = None;
        } else {
            let v: Vec<usize> = parse_list("lengths", l)?;
            g.length_min = *v.iter().min().ok_or_else(|| CliError::usage("--lengths is empty"))?;
            g.length_max = *v.iter().max().unwrap_or(&g.length_min);
            g.lengths = Some(v);
        }
    }
    if let Some(s) = &a.snr {
        g.snr = if s.trim().eq_ignore_ascii_case("none") {
            Vec::new()
        } else {
            parse_list("snr", s)?
        };
    }
    if let Some(c) = a.count {
        g.count = c;
    }
    if a.grid {
        g.grid = true;
    }
    if let Some(c) = a.cell_size {
        g.cell_size = c;
    }
    if let Some(b) = &a.balance {
        g.balance = match b.as_str() {
            "strata" => Balance::Strata,
            "models" => Balance::Models,
            other => return Err(CliError::usage(format!("--balance: unknown '{other}'"))),
        };
    }
    if let Some(o) = &a.out {
        g.out = Some(o.clone());
    }
    Ok(())
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) -> CliResult<()> {
    if let Some(t) = &a.task {
        cfg.hyper.task = parse_task(t)?;
    }
    if let Some(d) = &a.data {
        cfg.train.data = Some(d.clone());
    }
    if a.curriculum {
        cfg.train.curriculum = true;
    }
    if let Some(b) = &a.bins {
        cfg.train.bins = Some(parse_bins(b)?);
    }
    if let Some(k) = a.kfold {
        cfg.train.kfold = Some(k);
    }
    if let Some(e) = a.epochs {
        cfg.hyper.epochs = e;
    }
    if let Some(p) = a.patience {
        cfg.hyper.patience = p;
        cfg.hyper.curriculum_patience = p;
    } else if cfg.hyper.patience > cfg.hyper.epochs {
        // Short runs: the default patience would exceed the epoch budget.
        log::info!("patience {} capped at {} epochs", cfg.hyper.patience, cfg.hyper.epochs);
        cfg.hyper.patience = cfg.hyper.epochs;
        cfg.hyper.curriculum_patience = cfg.hyper.curriculum_patience.min(cfg.hyper.epochs);
    }
    if let Some(lr) = a.lr {
        cfg.hyper.learn_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.hyper.batch_size = b;
    }
    if let Some(o) = &a.optimizer {
        cfg.hyper.optimizer = match o.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(CliError::usage(format!("--optimizer: unknown '{other}'"))),
        };
    }
    if let Some(p) = &a.positional_encoding {
        cfg.model.positional_encoding = match p.as_str() {
            "off" => PositionalEncoding::Off,
            "sinusoidal" => PositionalEncoding::Sinusoidal,
            other => return Err(CliError::usage(format!("--positional-encoding: unknown '{other}'"))),
        };
    }
    if let Some(o) = &a.out {
        cfg.train.out = Some(o.clone());
    }
    Ok(())
}

fn required(value: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    value
        .clone()
        .ok_or_else(|| CliError::usage(format!("--{flag} is required (flag or config file)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dataset_dir(manifest: &Path) -> PathBuf {
    if manifest.is_dir() {
        manifest.to_path_buf()
    } else {
        manifest.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn manifest_file(manifest: &Path) -> PathBuf {
    if manifest.is_dir() {
        manifest.join(crate::trajgen::MANIFEST_FILE)
    } else {
        manifest.to_path_buf()
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are printed to stderr as `error[class]: message`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code
        }
    }
}

/// Resolves the configuration and runs the parsed command.
pub fn execute(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::from(Error::io(path, e)))?;
            RunConfig::from_toml(&text).map_err(|m| CliError {
                code: EXIT_USAGE,
                class: "config".into(),
                message: format!("{}: {m}", path.display()),
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.hyper.seed = cfg.seed;
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    let name = match &cli.command {
        Command::Generate(a) => {
            apply_generate(&mut cfg.generate, a)?;
            "generate"
        }
        Command::Train(a) => {
            apply_train(&mut cfg, a)?;
            "train"
        }
        Command::Evaluate(a) => {
            if let Some(t) = &a.task {
                cfg.hyper.task = parse_task(t)?;
            }
            for (slot, v) in [
                (&mut cfg.evaluate.checkpoints, &a.checkpoints),
                (&mut cfg.evaluate.grid, &a.grid),
                (&mut cfg.evaluate.out, &a.out),
            ] {
                if v.is_some() {
                    *slot = v.clone();
                }
            }
            "evaluate"
        }
        Command::Predict(a) => {
            for (slot, v) in [
                (&mut cfg.predict.checkpoints, &a.checkpoints),
                (&mut cfg.predict.input, &a.input),
                (&mut cfg.predict.out, &a.out),
            ] {
                if v.is_some() {
                    *slot = v.clone();
                }
            }
            "predict"
        }
        Command::Report(a) => {
            if a.eval.is_some() {
                cfg.report.eval = a.eval.clone();
            }
            if a.out.is_some() {
                cfg.report.out = a.out.clone();
            }
            "report"
        }
    };
    cfg.command = Some(name.to_string());
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::from(Error::Config(format!("thread pool: {e}"))))?;
    pool.install(|| match name {
        "generate" => cmd_generate(&cfg),
        "train" => cmd_train(&cfg),
        "evaluate" => cmd_evaluate(&cfg),
        "predict" => cmd_predict(&cfg),
        _ => cmd_report(&cfg),
    })
}

fn echo_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_text(path, &cfg.to_toml()?)
}

fn cmd_generate(cfg: &RunConfig) -> CliResult<()> {
    let g = &cfg.generate;
    let out = required(&g.out, "out")?;
    create_dir(&out)?;
    let ds = if g.grid {
        if g.alphas.is_some() {
            return Err(CliError::usage("--alphas cannot be combined with --grid (grid cells use each model's 0.1 grid)"));
        }
        let spec = GridSpec {
            cell_size: g.cell_size,
            lengths: g.lengths.clone().unwrap_or_else(evaluation_lengths),
            snr_values: g.snr.clone(),
            models: g.models.clone(),
            seed: cfg.seed,
        };
        build_grid(&spec, Some(&out))?
    } else {
        let spec = DatasetSpec {
            count: g.count,
            length_range: (g.length_min, g.length_max),
            models: g.models.clone(),
            alpha_grid: g.alphas.clone(),
            snr_values: g.snr.clone(),
            seed: cfg.seed,
            split: g.split,
            balance: g.balance,
        };
        build_dataset(&spec, &out)?
    };
    echo_config(cfg, &out.join(RESOLVED_CONFIG))?;
    println!("wrote {} trajectories to {}", ds.len(), out.display());
    Ok(())
}

fn card(cfg: &RunConfig, mc: &ModelConfig, manifest_sha: &str, params: &ModelParams, bin: Option<LengthBin>, hist: &TrainHistory) -> ModelCard {
    let h = &cfg.hyper;
    ModelCard {
        config: mc.clone(),
        seed: cfg.seed,
        manifest_sha256: manifest_sha.to_string(),
        length_bin: bin.map(|b| (b.lo, b.hi)),
        param_digest: params.digest(),
        notes: vec![
            ("optimizer".into(), format!("{:?}", h.optimizer).to_lowercase()),
            ("learn_rate".into(), h.learn_rate.to_string()),
            ("batch_size".into(), h.batch_size.to_string()),
            ("epochs".into(), h.epochs.to_string()),
            ("best_epoch".into(), hist.best_epoch.to_string()),
            ("stop_epoch".into(), hist.stop_epoch.to_string()),
        ],
    }
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let data = required(&cfg.train.data, "data")?;
    let out = required(&cfg.train.out, "out")?;
    let mc = cfg.model_config();
    cfg.hyper.validate()?;
    mc.validate()?;
    let manifest = manifest_file(&data);
    let ds = read_dataset(&dataset_dir(&data))?;
    let manifest_sha = file_sha256(&manifest)?;
    create_dir(&out)?;
    echo_config(cfg, &out.join(RESOLVED_CONFIG))?;

    if let Some(k) = cfg.train.kfold {
        if cfg.train.curriculum {
            return Err(CliError::usage("--kfold and --curriculum are exclusive"));
        }
        let report = kfold_validate(&ds.samples, k, &mc, &cfg.hyper)?;
        write_text(&out.join("kfold.csv"), &report.to_csv())?;
        println!("{}-fold {}: {} ± {}", k, metric_name(mc.task()), report.mean, report.std);
        return Ok(());
    }

    if cfg.train.curriculum {
        let bins = match &cfg.train.bins {
            Some(b) => b.iter().map(|&(lo, hi)| LengthBin::new(lo, hi)).collect::<Result<Vec<_>>>()?,
            None => curriculum_bins(),
        };
        let data: Vec<BinData> = bins
            .iter()
            .map(|&b| BinData::from_dataset(&ds, b, cfg.hyper.curriculum_val_fraction))
            .collect();
        let res = curriculum_train(&data, &mc, &cfg.hyper)?;
        for r in &res.runs {
            let name = format!("history_r{}_{}_{}.csv", r.round, r.bin.lo, r.bin.hi);
            write_text(&out.join(name), &r.history.to_csv())?;
        }
        let round2: Vec<&TrainHistory> = res.runs.iter().filter(|r| r.round == 2).map(|r| &r.history).collect();
        let mut files = Vec::new();
        for ((bin, params), hist) in res.models.iter().zip(round2) {
            let file = format!("bin_{}_{}.ckpt", bin.lo, bin.hi);
            save_checkpoint(&Checkpoint::new(mc.clone(), params.clone(), cfg.seed), &out.join(&file))?;
            card(cfg, &mc, &manifest_sha, params, Some(*bin), hist).write(&out.join(format!("bin_{}_{}.card.txt", bin.lo, bin.hi)))?;
            files.push((*bin, file));
        }
        write_text(&out.join("curriculum_runs.csv"), &res.runs_csv())?;
        write_text(&out.join("curriculum_matrix.csv"), &res.matrix_csv())?;
        write_text(&out.join("selection.csv"), &res.selection_csv())?;
        let mut routes = String::from("lo,hi,checkpoint\n");
        for (served, model) in res.routes() {
            let file = &files.iter().find(|(b, _)| *b == model).expect("selected model exists").1;
            let _ = writeln!(routes, "{},{},{}", served.lo, served.hi, file);
        }
        write_text(&out.join(ROUTES_FILE), &routes)?;
        println!("curriculum finished: {} runs, {} bins", res.runs.len(), res.models.len());
        return Ok(());
    }

    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    let (params, hist) = train_once(&mc, &train, &val, &cfg.hyper)?;
    save_checkpoint(&Checkpoint::new(mc.clone(), params.clone(), cfg.seed), &out.join(SINGLE_CHECKPOINT))?;
    card(cfg, &mc, &manifest_sha, &params, None, &hist).write(&out.join("model.card.txt"))?;
    write_text(&out.join("history.csv"), &hist.to_csv())?;
    println!(
        "trained {} epochs (best {}), validation loss {}",
        hist.stop_epoch,
        hist.best_epoch,
        hist.val_loss[hist.best_epoch - 1]
    );
    Ok(())
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Alpha => "MAE",
        Task::Model => "micro-F1",
    }
}

fn cmd_evaluate(cfg: &RunConfig) -> CliResult<()> {
    let dir = required(&cfg.evaluate.checkpoints, "checkpoints")?;
    let grid = required(&cfg.evaluate.grid, "grid")?;
    let out = required(&cfg.evaluate.out, "out")?;
    let model = CompiledModel::load_dir(&dir)?;
    if model.task() != cfg.hyper.task {
        return Err(Error::Config(format!(
            "checkpoints are for task '{}' but task '{}' was requested",
            model.task(),
            cfg.hyper.task
        ))
        .into());
    }
    let ds = read_dataset(&dataset_dir(&grid))?;
    let report = sliced_report(&model, &ds)?;
    report.write(&out)?;
    echo_config(cfg, &out.join(RESOLVED_CONFIG))?;
    if !report.missing.is_empty() {
        eprintln!("warning: {} grid cells missing (listed in summary.txt)", report.missing.len());
    }
    println!("{} over {} samples: {}", metric_name(report.task), report.n, report.overall);
    Ok(())
}

/// One line of `predict` output, or the error recorded for an input line.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictLine {
    Alpha { id: usize, alpha: f64 },
    Model { id: usize, label: DiffusionModel, probs: [f64; 5] },
    Error { line: usize, class: String, message: String },
}

/// Predicts every line of a trajectory file's text. Bad lines become
/// error entries; the rest are predicted.
pub fn predict_text(model: &CompiledModel, text: &str) -> Vec<PredictLine> {
    let mut entries: Vec<Option<PredictLine>> = Vec::new();
    let mut valid: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |class: &str, message: String| PredictLine::Error {
            line,
            class: class.into(),
            message,
        };
        match parse_trajectory_line(raw) {
            Err(m) => entries.push(Some(err("parse", m))),
            Ok((_, pos)) if pos.len() < MIN_LENGTH => {
                let e = Error::TooShort {
                    length: pos.len(),
                    minimum: MIN_LENGTH,
                };
                entries.push(Some(err(e.class(), e.to_string())));
            }
            Ok((id, pos)) => match normalize_positions(&pos) {
                Err(e) => entries.push(Some(err(e.class(), e.to_string()))),
                Ok(_) => {
                    valid.push((entries.len(), id, pos));
                    entries.push(None);
                }
            },
        }
    }
    let seqs: Vec<&[f64]> = valid.iter().map(|v| v.2.as_slice()).collect();
    match model.predict(&seqs) {
        Ok(rows) => {
            for ((slot, id, _), row) in valid.iter().zip(rows) {
                entries[*slot] = Some(match model.task() {
                    Task::Alpha => PredictLine::Alpha { id: *id, alpha: row[0] },
                    Task::Model => {
                        let (label, probs) = class_probabilities(&row);
                        PredictLine::Model { id: *id, label, probs }
                    }
                });
            }
        }
        Err(e) => {
            for (slot, _, _) in &valid {
                entries[*slot] = Some(PredictLine::Error {
                    line: 0,
                    class: e.class().into(),
                    message: e.to_string(),
                });
            }
        }
    }
    entries.into_iter().flatten().collect()
}

fn cmd_predict(cfg: &RunConfig) -> CliResult<()> {
    let dir = required(&cfg.predict.checkpoints, "checkpoints")?;
    let input = required(&cfg.predict.input, "input")?;
    let out = required(&cfg.predict.out, "out")?;
    let model = CompiledModel::load_dir(&dir)?;
    let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
    let lines = predict_text(&model, &text);
    let mut preds = String::new();
    let mut errors = String::new();
    for l in &lines {
        match l {
            PredictLine::Alpha { id, alpha } => {
                let _ = writeln!(preds, "{id},{alpha}");
            }
            PredictLine::Model { id, label, probs } => {
                let _ = write!(preds, "{id},{}", label.name());
                for p in probs {
                    let _ = write!(preds, ",{p}");
                }
                preds.push('\n');
            }
            PredictLine::Error { line, class, message } => {
                eprintln!("warning: {}:{line}: error[{class}]: {message}", input.display());
                let _ = writeln!(errors, "{line},{class},{}", message.replace(',', ";"));
            }
        }
    }
    if lines.is_empty() {
        eprintln!("warning: {} contains no trajectories", input.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&out, &preds)?;
    let err_path = PathBuf::from(format!("{}.errors.csv", out.display()));
    if errors.is_empty() {
        let _ = std::fs::remove_file(&err_path);
    } else {
        write_text(&err_path, &format!("line,class,message\n{errors}"))?;
    }
    echo_config(cfg, &PathBuf::from(format!("{}.config.toml", out.display())))?;
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> CliResult<()> {
    let dir = required(&cfg.report.eval, "eval")?;
    let out = cfg.report.out.clone().unwrap_or_else(|| dir.clone());
    let report = read_report(&dir)?;
    report.write(&out)?;
    println!("{} over {} samples: {}", metric_name(report.task), report.n, report.overall);
    Ok(())
}
