//! `cavl` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cavl_core::adapters::{count_parameters, FinetuneMode};
use cavl_core::data::{write_corpus, MultimodalSample};
use cavl_core::error::{Error, Result};
use cavl_core::eval::{evaluate_alignment, evaluate_retrieval, Scoring};
use cavl_core::exec::Exec;
use cavl_core::gradcheck::{check_ops, op_names, OpCheck};
use cavl_core::heatmap::{diagonal_argmax_rows, diagonal_margin, export_heatmap, similarity_heatmap};
use cavl_core::metrics::JsonlWriter;
use cavl_core::model::{Model, TaskSpec};
use cavl_core::objectives::{ContrastiveForm, ContrastiveSpec};
use cavl_core::training::{
    finetune, full_loss_gradcheck, init_model, load_checkpoint, pretrain, save_checkpoint, Checkpoint,
};
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::{DataConfig, RunConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const PARTITION_FILE: &str = "partition.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "cavl", version, about = "Contrastive vision-language pre-training with adapter fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train from scratch on the configured corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune a pre-trained checkpoint.
    Finetune(FinetuneArgs),
    /// Retrieval recall and alignment on a held-out split.
    Eval(EvalArgs),
    /// Export the text/image cosine-similarity matrix.
    Heatmap(HeatmapArgs),
    /// Compare tape gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic corpus to a directory.
    GenData(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Read the corpus from a `gen-data` directory instead of generating it.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Disable data-parallel execution.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the contrastive term.
    #[arg(long)]
    pub w_pwcl: Option<f64>,
    /// `shifted` (default) or `literal`.
    #[arg(long)]
    pub contrastive: Option<String>,
    #[arg(long)]
    pub contrastive_offset: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `full`, `adapter1` or `adapter2`.
    #[arg(long)]
    pub mode: Option<String>,
    /// `retrieval` or `classification`.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Score with pooled backbone embeddings, skipping any adapters.
    #[arg(long)]
    pub zero_shot: bool,
    /// Number of held-out candidates.
    #[arg(long, default_value_t = 64)]
    pub candidates: usize,
    /// `test` or `train`.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all` or a comma-separated list of op names (`full_loss` for the
    /// combined pre-training objective).
    #[arg(long, default_value = "all")]
    pub ops: String,
    /// Sampled coordinates per parameter tensor for the combined loss.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `cavl --help` for usage");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

fn exec_of(common: &CommonArgs) -> Exec {
    if common.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

/// defaults < `base` (checkpoint record) < `--config` file < flags
fn resolve(common: &CommonArgs, base: Option<RunConfig>) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => base.unwrap_or_default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(d) = &common.corpus {
        cfg.data = DataConfig::Corpus { dir: d.clone() };
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| CliError::Usage("an output directory is required (--out)".into()))?;
    fs::create_dir_all(&dir).map_err(Error::from)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<(Model, Option<RunConfig>)> {
    let ckpt = load_checkpoint(path)?;
    let run = serde_json::from_value::<RunConfig>(ckpt.meta.run.clone()).ok();
    Ok((ckpt.into_model()?, run))
}

fn split<'c>(corpus: &'c cavl_core::data::SyntheticCorpus, name: &str) -> CliResult<&'c [MultimodalSample]> {
    match name {
        "test" => Ok(&corpus.test),
        "train" => Ok(&corpus.train),
        other => Err(CliError::Usage(format!("unknown split {other:?}; use test or train"))),
    }
}

fn cmd_pretrain(a: PretrainArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.common, None)?;
    let p = &mut cfg.pretrain;
    if let Some(v) = a.epochs {
        p.epochs = v;
    }
    if let Some(v) = a.batch_size {
        p.batch_size = v;
    }
    if let Some(v) = a.lr {
        p.lr = v;
    }
    if let Some(v) = a.w_pwcl {
        p.weights.pwcl = v;
    }
    if let Some(v) = &a.contrastive {
        p.contrastive.form = match v.as_str() {
            "literal" => ContrastiveForm::Literal,
            "shifted" => ContrastiveForm::Shifted,
            other => return Err(CliError::Usage(format!("unknown contrastive form {other:?}"))),
        };
    }
    if let Some(v) = a.contrastive_offset {
        p.contrastive = ContrastiveSpec {
            offset: v,
            ..p.contrastive
        };
    }
    cfg.validate()?;
    let out = output_dir(&cfg)?;
    let exec = exec_of(&a.common);
    let corpus = cfg.corpus()?;
    write_json(&out.join(CONFIG_FILE), &cfg.to_record())?;

    let model = init_model(&cfg.model, cfg.seed)?;
    let mut sink = JsonlWriter::create(&out.join(METRICS_FILE))?;
    let (model, optim) = pretrain(model, &corpus.train, &corpus.test, &cfg.pretrain, cfg.seed, exec, &mut sink)?;
    let ckpt = Checkpoint::from_model(&model, Some(optim), cfg.seed, cfg.to_record());
    save_checkpoint(&ckpt, &out.join(CHECKPOINT_FILE))?;
    info!("wrote {}", out.join(CHECKPOINT_FILE).display());
    println!("pretrain finished: {}", out.display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> CliResult<()> {
    let (pre, run) = load_model(&a.checkpoint)?;
    let mut cfg = resolve(&a.common, run)?;
    cfg.model = pre.config.clone();
    if let Some(t) = &a.task {
        cfg.finetune.task = match t.as_str() {
            "retrieval" => TaskSpec::Retrieval,
            "classification" => {
                let classes = match &cfg.data {
                    DataConfig::Generator(g) => g.n_classes,
                    DataConfig::Corpus { .. } => {
                        let corpus = cfg.corpus()?;
                        corpus.train.iter().map(|s| s.latent_class + 1).max().unwrap_or(0)
                    }
                };
                TaskSpec::Classification { classes }
            }
            other => return Err(CliError::Usage(format!("unknown task {other:?}"))),
        };
    }
    let f = &mut cfg.finetune;
    if let Some(m) = &a.mode {
        f.mode = m.parse::<FinetuneMode>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = a.bottleneck {
        f.bottleneck = v;
    }
    if let Some(v) = a.epochs {
        f.epochs = v;
    }
    if let Some(v) = a.batch_size {
        f.batch_size = v;
    }
    if let Some(v) = a.lr {
        f.lr = v;
    }
    cfg.validate()?;
    let out = output_dir(&cfg)?;
    let exec = exec_of(&a.common);
    let corpus = cfg.corpus()?;
    let mut sink = JsonlWriter::create(&out.join(METRICS_FILE))?;
    let outcome = finetune(&pre, &corpus.train, &corpus.test, &cfg.finetune, cfg.seed, exec, &mut sink)?;
    let report = count_parameters(&outcome.model.params, &outcome.partition);
    write_json(&out.join(PARTITION_FILE), &report)?;
    let ckpt = Checkpoint::from_model(&outcome.model, Some(outcome.optim), cfg.seed, cfg.to_record());
    save_checkpoint(&ckpt, &out.join(CHECKPOINT_FILE))?;
    println!(
        "finetune ({}) finished: {} of {} parameters trainable; {}",
        cfg.finetune.mode,
        report.trainable,
        report.trainable + report.frozen,
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let (model, run) = load_model(&a.checkpoint)?;
    let mut cfg = resolve(&a.common, run)?;
    cfg.model = model.config.clone();
    let corpus = cfg.corpus()?;
    let samples = split(&corpus, &a.split)?;
    if a.candidates == 0 || a.candidates > samples.len() {
        return Err(Error::SplitTooSmall {
            requested: a.candidates,
            available: samples.len(),
        }
        .into());
    }
    let samples = &samples[..a.candidates];
    let scoring = if a.zero_shot { Scoring::ZeroShot } else { Scoring::Finetuned };
    let exec = exec_of(&a.common);
    let r = evaluate_retrieval(&model, samples, scoring, exec)?;
    let al = evaluate_alignment(&model, samples, scoring, exec)?;
    let doc = serde_json::json!({
        "candidates": r.candidates,
        "zero_shot": a.zero_shot,
        "recall@1": r.recall[0],
        "recall@5": r.recall[1],
        "recall@10": r.recall[2],
        "aps": al.aps,
        "mean_off_diagonal": al.mean_off_diagonal,
    });
    if let Some(out) = &cfg.output_dir {
        fs::create_dir_all(out).map_err(Error::from)?;
        write_json(&out.join("eval.json"), &doc)?;
    }
    println!("{doc}");
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs) -> CliResult<()> {
    let (model, run) = load_model(&a.checkpoint)?;
    let mut cfg = resolve(&a.common, run)?;
    cfg.model = model.config.clone();
    let out = output_dir(&cfg)?;
    let corpus = cfg.corpus()?;
    let samples = split(&corpus, &a.split)?;
    let m = similarity_heatmap(&model, samples, a.n, exec_of(&a.common))?;
    export_heatmap(&m, &out.join("heatmap.csv"), &out.join("heatmap.pgm"))?;
    println!(
        "heatmap {n}x{n}: diagonal margin {:.4}, diagonal row maxima {}/{n}",
        diagonal_margin(&m),
        diagonal_argmax_rows(&m),
        n = a.n
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let requested: Vec<String> = a.ops.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    let all = requested.iter().any(|s| s == "all");
    let want_full = all || requested.iter().any(|s| s == "full_loss");
    let ops: Vec<String> = if all {
        Vec::new()
    } else {
        requested.into_iter().filter(|s| s != "full_loss").collect()
    };
    let mut checks: Vec<OpCheck> = if all || !ops.is_empty() {
        check_ops(&ops)?
    } else {
        Vec::new()
    };
    if want_full {
        for spec in [ContrastiveSpec::default(), ContrastiveSpec::literal()] {
            checks.push(full_loss_gradcheck(a.seed, spec, a.samples)?);
        }
    }
    let mut stdout = std::io::stdout().lock();
    let io = |e: std::io::Error| CliError::Runtime(Error::Io(e));
    writeln!(stdout, "{:<22} {:>14} {:>10}  status", "op", "max_rel_err", "tol").map_err(io)?;
    for c in &checks {
        writeln!(
            stdout,
            "{:<22} {:>14.3e} {:>10.0e}  {}",
            c.name,
            c.max_relative_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        )
        .map_err(io)?;
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(CliError::Runtime(Error::InvalidTensor(format!(
            "{failed} of {} gradient checks exceeded tolerance",
            checks.len()
        ))));
    }
    if checks.is_empty() {
        return Err(CliError::Usage(format!("no ops selected; known: all, full_loss, {}", op_names().join(", "))));
    }
    Ok(())
}

fn cmd_gen_data(a: CommonArgs) -> CliResult<()> {
    let cfg = resolve(&a, None)?;
    if matches!(cfg.data, DataConfig::Corpus { .. }) {
        return Err(CliError::Usage("gen-data needs a generator configuration, not a corpus".into()));
    }
    cfg.validate()?;
    let out = output_dir(&cfg)?;
    let corpus = cfg.corpus()?;
    write_corpus(&out, &corpus)?;
    println!(
        "wrote {} train and {} test samples to {}",
        corpus.train.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

/// Logging goes to stderr, filtered by `CAVL_LOG` (default `warn`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("CAVL_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}
