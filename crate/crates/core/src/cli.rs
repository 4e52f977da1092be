//! The `abc` command: verify, bench, train and decode, configured by a JSON
//! document plus flags. Flags win over the file; `ABC_OUT_DIR` overrides the
//! configured output directory and `--out-dir` overrides both.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{emit_csv, run_decode_bench, summary, BenchSpec};
use crate::checkpoint::Checkpoint;
use crate::error::{domain, Error, Result};
use crate::model::{fit, greedy_decode, Model, ModelKind, TaskKind, TaskSpec, ToyModelConfig, TrainSettings};
use crate::strategies::StrategyKind;
use crate::verify::{run_suite, SUITES};

pub const OUT_DIR_ENV: &str = "ABC_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub ckpt: Option<PathBuf>,
    /// Source (seq2seq) or prompt (language model) token ids.
    pub input: Vec<u32>,
    pub max_len: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self { ckpt: None, input: Vec::new(), max_len: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub suite: Option<String>,
}

/// Everything a command reads. Every flag has a field here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `model.seed` and `bench.seed` when set.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub model: ToyModelConfig,
    pub task: TaskSpec,
    pub train: TrainSettings,
    pub bench: BenchSpec,
    pub decode: DecodeSettings,
    pub verify: VerifySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("out"),
            model: ToyModelConfig { kind: ModelKind::Seq2seq, ..ToyModelConfig::default() },
            task: TaskSpec::default(),
            train: TrainSettings::default(),
            bench: BenchSpec::default(),
            decode: DecodeSettings::default(),
            verify: VerifySettings::default(),
        }
    }
}

impl RunConfig {
    /// Strict parse; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config { path, message: e.into_inner().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config { path: ".".into(), message: format!("{}: {e}", path.display()) })?;
        Self::from_json(&text)
    }

    fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.model.seed = seed;
            self.bench.seed = seed;
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "abc", version, about = "Attention with bounded-memory control")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run invariant suites.
    Verify {
        #[arg(long)]
        suite: Option<String>,
    },
    /// Measure decode latency and state size; writes bench.csv.
    Bench(BenchArgs),
    /// Train a toy model; writes model.ckpt and curve.csv.
    Train(TrainArgs),
    /// Greedy decoding from a checkpoint; prints token ids.
    Decode(DecodeArgs),
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    lens: Option<Vec<usize>>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<ModelKind>,
    /// Strategy for the causal and cross sites.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Sets both task length bounds.
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    input: Option<Vec<u32>>,
    #[arg(long)]
    max_len: Option<usize>,
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown task `{s}`"))
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown model kind `{s}`"))
}

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Failed = 1,
    Usage = 2,
}

fn exit_for(e: &Error) -> Exit {
    match e {
        Error::Numeric(_) => Exit::Failed,
        _ => Exit::Usage,
    }
}

/// Parses arguments, runs one command and returns the exit status. Output
/// goes to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, env_out_dir: Option<PathBuf>, out: &mut dyn Write, err: &mut dyn Write) -> Exit
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                Exit::Usage
            } else {
                let _ = write!(out, "{text}");
                Exit::Ok
            };
        }
    };
    match dispatch(cli, env_out_dir, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "abc: {e}");
            exit_for(&e)
        }
    }
}

fn dispatch(cli: Cli, env_out_dir: Option<PathBuf>, out: &mut dyn Write) -> Result<Exit> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = env_out_dir {
        cfg.out_dir = dir;
    }
    if let Some(dir) = cli.common.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(seed) = cli.common.seed {
        cfg.seed = Some(seed);
    }
    cfg.apply_seed();
    match cli.command {
        Command::Verify { suite } => {
            if suite.is_some() {
                cfg.verify.suite = suite;
            }
            cmd_verify(&cfg, out)
        }
        Command::Bench(a) => {
            let seed = cfg.bench.seed;
            let b = &mut cfg.bench;
            if let Some(names) = a.strategy {
                let n = a.n.as_ref().or(Some(&b.ns)).and_then(|v| v.first().copied()).unwrap_or(0);
                b.strategies = names.iter().map(|s| StrategyKind::from_name(s, n, seed)).collect::<Result<_>>()?;
            }
            set(&mut b.ns, a.n);
            set(&mut b.lens, a.lens);
            set(&mut b.batch, a.batch);
            set(&mut b.reps, a.reps);
            set(&mut b.warmup, a.warmup);
            set(&mut b.threads, a.threads);
            cmd_bench(&cfg, out)
        }
        Command::Train(a) => {
            set(&mut cfg.task.kind, a.task);
            if a.corpus.is_some() {
                cfg.task.corpus = a.corpus;
            }
            set(&mut cfg.model.kind, a.kind);
            if let Some(len) = a.len {
                cfg.task.min_len = len;
                cfg.task.max_len = len;
            }
            if let Some(n) = a.n {
                cfg.model.causal.n = n;
                cfg.model.cross.n = n;
            }
            if let Some(name) = a.strategy {
                let s = StrategyKind::from_name(&name, cfg.model.causal.n, cfg.model.seed)?;
                cfg.model.causal.strategy = s.clone();
                cfg.model.cross.strategy = s;
            }
            set(&mut cfg.train.steps, a.steps);
            set(&mut cfg.train.batch, a.batch);
            set(&mut cfg.model.optimizer.lr, a.lr);
            cmd_train(&cfg, out)
        }
        Command::Decode(a) => {
            if a.ckpt.is_some() {
                cfg.decode.ckpt = a.ckpt;
            }
            set(&mut cfg.decode.input, a.input);
            set(&mut cfg.decode.max_len, a.max_len);
            cmd_decode(&cfg, out)
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn io_write(r: std::io::Result<()>) -> Result<()> {
    r.map_err(Error::Io)
}

pub fn cmd_verify(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit> {
    let names: Vec<&str> = match &cfg.verify.suite {
        Some(s) if SUITES.contains(&s.as_str()) => vec![s.as_str()],
        Some(s) => return Err(Error::Usage(format!("unknown suite `{s}`; expected one of {}", SUITES.join(", ")))),
        None => SUITES.to_vec(),
    };
    let seed = cfg.seed.unwrap_or(0);
    let mut all = true;
    for name in names {
        let report = run_suite(name, seed)?;
        all &= report.passed();
        io_write(writeln!(out, "{report}"))?;
    }
    Ok(if all { Exit::Ok } else { Exit::Failed })
}

pub fn cmd_bench(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit> {
    let records = run_decode_bench(&cfg.bench)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("bench.csv");
    emit_csv(&records, &path)?;
    io_write(write!(out, "{}", summary(&records)))?;
    io_write(writeln!(out, "wrote {}", path.display()))?;
    Ok(if records.iter().any(|r| r.failed()) { Exit::Failed } else { Exit::Ok })
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit> {
    let mut model = Model::new(cfg.model.clone())?;
    let (report, eval) = fit(&mut model, &cfg.task, &cfg.train)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    model.to_checkpoint()?.save(&ckpt)?;
    let curve = cfg.out_dir.join("curve.csv");
    let mut w = csv::Writer::from_path(&curve).map_err(|e| Error::Format(e.to_string()))?;
    for p in &report.curve {
        w.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    io_write(writeln!(
        out,
        "final: steps={} held_out_loss={:.6} perplexity={:.4} accuracy={:.4}",
        report.curve.len(),
        eval.loss,
        eval.perplexity,
        eval.accuracy
    ))?;
    io_write(writeln!(out, "wrote {} and {}", ckpt.display(), curve.display()))?;
    Ok(Exit::Ok)
}

pub fn cmd_decode(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit> {
    let Some(path) = &cfg.decode.ckpt else {
        return Err(Error::Usage("decode needs --ckpt".into()));
    };
    if !path.exists() {
        return Err(Error::Usage(format!("checkpoint {} not found", path.display())));
    }
    let model = Model::from_checkpoint(&Checkpoint::load(path)?)?;
    let input = match (model.config().kind, cfg.decode.input.is_empty()) {
        (ModelKind::Lm, true) => vec![crate::model::BOS],
        (ModelKind::Seq2seq, true) => return domain("seq2seq decoding needs --input"),
        _ => cfg.decode.input.clone(),
    };
    let tokens = greedy_decode(&model, &input, cfg.decode.max_len)?;
    let text: Vec<String> = tokens.iter().map(u32::to_string).collect();
    io_write(writeln!(out, "{}", text.join(" ")))?;
    Ok(Exit::Ok)
}
