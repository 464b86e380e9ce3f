//! The `moelab` command line.
//!
//! Exit codes: 0 on success (including `--help`), 1 on usage errors, 2 on
//! runtime or IO errors. Settings resolve as defaults, then `--config`,
//! then `--set KEY=VALUE`, then dedicated flags.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use moelab_core::grad::Parameterized;
use moelab_core::optim::OptimizerKind;
use moelab_core::routers::{AnyRouter, RouterKind};
use serde::Serialize;

use crate::characterize::{build_layer, characterize, load_inputs, measure_latency};
use crate::config::{ExperimentConfig, InputSource};
use crate::container::{named_parameters, save_tensors};
use crate::embeddings::{generate_random_states, save_embeddings};
use crate::error::{Error, Result};
use crate::export::export_figure_data;
use crate::train::{train_model, ToyModel};

#[derive(Debug, Parser)]
#[command(
    name = "moelab",
    version,
    about = "Characterize, benchmark and train mixture-of-experts routers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Routing metrics and router latency per router, as CSV or JSON.
    Characterize(CharacterizeArgs),
    /// Single-token latency statistics per router.
    Bench(BenchArgs),
    /// Trainable router parameter count.
    Params(ParamsArgs),
    /// Train the toy byte-level MoE language model and print its loss log.
    Train(TrainArgs),
    /// Write heatmap, bar and histogram data for one router.
    Export(ExportArgs),
    /// Write a file of Gaussian hidden states in the embedding format.
    GenEmbeddings(GenArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

fn router_name(s: &str) -> std::result::Result<RouterKind, String> {
    s.parse::<RouterKind>().map_err(|e| e.to_string())
}

fn optimizer_name(s: &str) -> std::result::Result<OptimizerKind, String> {
    s.parse::<OptimizerKind>().map_err(|e| e.to_string())
}

/// Settings shared by the characterization subcommands.
#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Router: linear, attention, mlp, hybrid, mlp-hadamard, hash or self-supervised.
    #[arg(long, value_parser = router_name)]
    pub router: Option<RouterKind>,
    /// Seed for weights, inputs and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of experts E.
    #[arg(long)]
    pub experts: Option<usize>,
    /// Experts per token k.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Hidden size H.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Batch size B of the input states.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Sequence length S of the input states.
    #[arg(long)]
    pub seq: Option<usize>,
    /// Expert FFN width; defaults to 4H.
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Embedding file to use instead of random states.
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    /// Tensor container holding a BERT-style FFN cloned into every expert.
    #[arg(long, value_name = "PATH")]
    pub experts_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    /// Timed single-token forwards per repetition.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Repetitions.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Untimed forwards before timing.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Also time full forwards through the experts.
    #[arg(long)]
    pub with_experts: bool,
}

#[derive(Debug, Args)]
pub struct CharacterizeArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[command(flatten)]
    pub timing: TimingArgs,
    /// Report every router.
    #[arg(long, conflicts_with = "router")]
    pub all: bool,
    /// Output format.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Write the report here instead of standard output.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[command(flatten)]
    pub timing: TimingArgs,
    /// Benchmark every router.
    #[arg(long, conflicts_with = "router")]
    pub all: bool,
    /// Output format.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// List every router as `router,param_count`.
    #[arg(long, conflicts_with = "router")]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Output path prefix; files get `_heatmap.csv` and similar suffixes.
    #[arg(long, value_name = "PATH")]
    pub prefix: PathBuf,
    /// Also write an 8-bit PGM heatmap.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Destination embedding file.
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Batch size B.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Sequence length S.
    #[arg(long, default_value_t = 128)]
    pub seq: usize,
    /// Hidden size H.
    #[arg(long, default_value_t = 768)]
    pub hidden: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training text; one sequence per line, at least 1000 bytes.
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    /// Flat `key = value` config file; the `train_*` keys and `lr`,
    /// `grad_accum`, `steps`, `log_every`, `seq_len`, `optimizer`, `seed` apply.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Router: linear, attention, mlp, hybrid, mlp-hadamard, hash or self-supervised.
    #[arg(long, value_parser = router_name)]
    pub router: Option<RouterKind>,
    /// Seed for weights, inputs and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of experts E.
    #[arg(long)]
    pub experts: Option<usize>,
    /// Experts per token k.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Model width H.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Expert FFN width; defaults to 4H.
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sequences per micro-batch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Micro-batches per optimizer step.
    #[arg(long)]
    pub grad_accum: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Steps per logged loss.
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Bytes kept per line.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Optimizer: adam or sgd.
    #[arg(long, value_parser = optimizer_name)]
    pub optimizer: Option<OptimizerKind>,
    /// Output format.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Save trained parameters to a tensor container.
    #[arg(long, value_name = "PATH")]
    pub save: Option<PathBuf>,
}

fn base_config(config: &Option<PathBuf>, set: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim()).map_err(Error::Invalid)?;
    }
    Ok(cfg)
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = base_config(&self.config, &self.set)?;
        let rc = &mut cfg.router_cfg;
        if let Some(r) = self.router {
            cfg.router = r;
        }
        if let Some(s) = self.seed {
            rc.seed = s;
            cfg.train.seed = s;
        }
        rc.num_experts = self.experts.unwrap_or(rc.num_experts);
        rc.top_k = self.top_k.unwrap_or(rc.top_k);
        rc.hidden_size = self.hidden.unwrap_or(rc.hidden_size);
        cfg.batch = self.batch.unwrap_or(cfg.batch);
        cfg.seq = self.seq.unwrap_or(cfg.seq);
        cfg.d_ff = self.d_ff.or(cfg.d_ff);
        if let Some(p) = &self.embeddings {
            cfg.input = InputSource::File(p.clone());
        }
        cfg.experts_file = self.experts_file.clone().or(cfg.experts_file);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TimingArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        cfg.runs = self.runs.unwrap_or(cfg.runs);
        cfg.reps = self.reps.unwrap_or(cfg.reps);
        cfg.warmup = self.warmup.unwrap_or(cfg.warmup);
        cfg.latency_with_experts |= self.with_experts;
        cfg.validate()
    }
}

fn kinds(cfg: &ExperimentConfig, all: bool) -> Vec<RouterKind> {
    if all {
        RouterKind::ALL.to_vec()
    } else {
        vec![cfg.router]
    }
}

#[derive(Debug, Serialize)]
struct BenchRow {
    router: String,
    router_mean_us: f64,
    router_median_us: f64,
    router_p99_us: f64,
    total_mean_us: f64,
    total_median_us: f64,
    total_p99_us: f64,
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

/// Failure of a parsed command: usage errors exit 1, everything else 2.
enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<moelab_core::Error> for Failure {
    fn from(e: moelab_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Settings errors are usage errors; unreadable config files are not.
fn usage(e: Error) -> Failure {
    match e {
        Error::Io { .. } => Failure::Runtime(e),
        e => Failure::Usage(e),
    }
}

fn execute(command: Command, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match command {
        Command::Characterize(a) => {
            let mut cfg = a.exp.resolve().map_err(usage)?;
            a.timing.apply(&mut cfg).map_err(usage)?;
            let report = characterize(&cfg, &kinds(&cfg, a.all))?;
            let text = match a.format {
                Format::Csv => report.to_csv(),
                Format::Json => report.to_json() + "\n",
            };
            match a.output {
                Some(path) => fs::write(&path, text).map_err(|e| Error::io(&path, e))?,
                None => write_out(out, &text)?,
            }
            Ok(())
        }
        Command::Bench(a) => {
            let mut cfg = a.exp.resolve().map_err(usage)?;
            a.timing.apply(&mut cfg).map_err(usage)?;
            let inputs = load_inputs(&cfg)?;
            let mut rows = Vec::new();
            for kind in kinds(&cfg, a.all) {
                let layer = build_layer(&cfg, kind)?;
                let lat = measure_latency(&cfg, &layer, &inputs)?;
                rows.push(BenchRow {
                    router: kind.name().into(),
                    router_mean_us: lat.router.mean_us,
                    router_median_us: lat.router.median_us,
                    router_p99_us: lat.router.p99_us,
                    total_mean_us: lat.total.mean_us,
                    total_median_us: lat.total.median_us,
                    total_p99_us: lat.total.p99_us,
                });
            }
            let text = match a.format {
                Format::Json => {
                    serde_json::to_string_pretty(&rows).expect("plain data serializes") + "\n"
                }
                Format::Csv => {
                    let mut s = String::from(
                        "router,router_mean_us,router_median_us,router_p99_us,total_mean_us,total_median_us,total_p99_us\n",
                    );
                    for r in &rows {
                        s += &format!(
                            "{},{},{},{},{},{},{}\n",
                            r.router,
                            r.router_mean_us,
                            r.router_median_us,
                            r.router_p99_us,
                            r.total_mean_us,
                            r.total_median_us,
                            r.total_p99_us
                        );
                    }
                    s
                }
            };
            Ok(write_out(out, &text)?)
        }
        Command::Params(a) => {
            let cfg = a.exp.resolve().map_err(usage)?;
            let mut text = String::new();
            for kind in kinds(&cfg, a.all) {
                let n = AnyRouter::build(kind, &cfg.router_cfg)?.param_count();
                text += &if a.all {
                    format!("{kind},{n}\n")
                } else {
                    format!("{n}\n")
                };
            }
            Ok(write_out(out, &text)?)
        }
        Command::Export(a) => {
            let cfg = a.exp.resolve().map_err(usage)?;
            let inputs = load_inputs(&cfg)?;
            let layer = build_layer(&cfg, cfg.router)?;
            let y = layer.forward(&inputs)?;
            let written = export_figure_data(&y.decision, &y.output, &a.prefix, a.pgm)?;
            let text: String = written
                .iter()
                .map(|p| format!("{}\n", p.display()))
                .collect();
            Ok(write_out(out, &text)?)
        }
        Command::GenEmbeddings(a) => {
            if a.batch == 0 || a.seq == 0 || a.hidden == 0 {
                return Err(Failure::Usage(Error::Invalid(
                    "batch, seq and hidden must be at least 1".into(),
                )));
            }
            let t = generate_random_states(a.batch, a.seq, a.hidden, a.seed)?;
            Ok(save_embeddings(&a.output, &t)?)
        }
        Command::Train(a) => train(a, out),
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let mut cfg = base_config(&a.config, &a.set).map_err(usage)?;
    let t = &mut cfg.train;
    t.router = a.router.unwrap_or(t.router);
    t.seed = a.seed.unwrap_or(t.seed);
    t.experts = a.experts.unwrap_or(t.experts);
    t.top_k = a.top_k.unwrap_or(t.top_k);
    t.hidden = a.hidden.unwrap_or(t.hidden);
    t.d_ff = a.d_ff.or(t.d_ff);
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch = a.batch.unwrap_or(t.batch);
    t.grad_accum = a.grad_accum.unwrap_or(t.grad_accum);
    t.steps = a.steps.unwrap_or(t.steps);
    t.log_every = a.log_every.unwrap_or(t.log_every);
    t.seq_len = a.seq_len.unwrap_or(t.seq_len);
    t.optimizer = a.optimizer.unwrap_or(t.optimizer);
    cfg.validate().map_err(usage)?;
    let corpus = fs::read(&a.corpus).map_err(|e| Error::io(&a.corpus, e))?;
    let mut model = ToyModel::new(&cfg.train)?;
    let report = train_model(&mut model, &cfg.train, &corpus)?;
    if let Some(path) = &a.save {
        save_tensors(path, &named_parameters(&model, ""))?;
    }
    let text = match a.format {
        Format::Json => {
            serde_json::to_string_pretty(&report).expect("plain data serializes") + "\n"
        }
        Format::Csv => {
            let mut s = format!(
                "step,loss,aux\n0,{},{}\n",
                report.initial_loss, report.initial_aux
            );
            for e in &report.log {
                s += &format!("{},{},{}\n", e.step, e.loss, e.aux);
            }
            s
        }
    };
    Ok(write_out(out, &text)?)
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}
