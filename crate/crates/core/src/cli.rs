//! Command line driver behind the `msin` binary.
//!
//! Every setting can come from a flag, from a flat `key=value` file given
//! with `--config`, or from the built-in default, in that order of
//! precedence. File keys are the flag names with underscores
//! (`--d-s` ↔ `d_s`); unknown keys are rejected.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
use crate::data::{corpus_tokens, make_samples, Corpus, DataError, Dataset, SampleConfig, Series, SplitRule, Vocab};
use crate::eval::{self, rank_by_mass, select_relevant, EvalError};
use crate::model::{self, ModelCheckError, ModelConfig, ModelError, ModelParams, Objective, Variant, GRAD_CHECK_SEED};
use crate::rng::{seeded, Stream};
use crate::synth::{self, Planting, SynthError, SynthSpec};
use crate::text::{self, PoolDivisor, TextError};
use crate::train::{self, SearchSpace, TrainConfig, TrainError};

/// Failure classes, mapped to process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "msin", version, about = "Multi-step interrelation network for joint series and text modelling")]
pub struct Cli {
    /// Flat key=value settings file; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate a synthetic corpus and series with planted associations.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus history.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write report files.
    Eval(EvalArgs),
    /// Print one day's documents ranked by attention mass.
    Rank(RankArgs),
    /// Check tape gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub docs_min: Option<usize>,
    #[arg(long)]
    pub docs_max: Option<usize>,
    #[arg(long)]
    pub doc_len_min: Option<usize>,
    #[arg(long)]
    pub doc_len_max: Option<usize>,
    #[arg(long)]
    pub background_words: Option<usize>,
    #[arg(long)]
    pub lexicon_size: Option<usize>,
    /// Plant each document independently with this probability instead of
    /// exactly one per day.
    #[arg(long)]
    pub plant_prob: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub start: Option<NaiveDate>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Inclusive last training date.
    #[arg(long)]
    pub train_until: Option<NaiveDate>,
    /// Inclusive last validation date.
    #[arg(long)]
    pub valid_until: Option<NaiveDate>,
    /// Train, validation and test fractions, e.g. `0.7,0.15,0.15`.
    #[arg(long)]
    pub split_fracs: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub d_s: Option<usize>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub d_w: Option<usize>,
    #[arg(long)]
    pub d_a: Option<usize>,
    /// Upper bound on the vocabulary, reserved ids included.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub daily_doc_cap: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub l1: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub pool_divisor: Option<PoolDivisor>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// GloVe-style text file; restricts the vocabulary to its words.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Random-search trials run before the final training; 0 disables.
    #[arg(long)]
    pub search_budget: Option<usize>,
    /// Steps per random-search trial.
    #[arg(long)]
    pub search_steps: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Print every validation evaluation.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Which split to evaluate: test, valid, train or all.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Day to rank; defaults to the last day with a full window.
    #[arg(long)]
    pub date: Option<NaiveDate>,
    /// Debugging aid: rank this comma-separated mass vector instead of the
    /// model's attention. Needs no checkpoint when no date is given.
    #[arg(long)]
    pub inject_mass: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check one variant only; all three by default.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

const SYNTH_KEYS: &[&str] = &[
    "days", "docs_min", "docs_max", "doc_len_min", "doc_len_max", "background_words", "lexicon_size",
    "plant_prob", "phi", "alpha", "sigma", "start", "out_dir",
];
const DATA_KEYS: &[&str] = &["corpus", "series", "train_until", "valid_until", "split_fracs"];
const MODEL_KEYS: &[&str] = &[
    "variant", "d_s", "d_h", "d_w", "d_a", "vocab_size", "window", "max_len", "daily_doc_cap", "dropout", "l1",
    "l2", "objective", "pool_divisor",
];
const TRAIN_KEYS: &[&str] = &[
    "embeddings", "learning_rate", "batch_size", "max_steps", "clip_norm", "patience", "eval_every",
    "search_budget", "search_steps", "out_dir",
];
const EVAL_KEYS: &[&str] = &["checkpoint", "split", "k_max", "out_dir"];
const RANK_KEYS: &[&str] = &["checkpoint", "corpus", "series", "date", "inject_mass"];
const GRADCHECK_KEYS: &[&str] = &["variant", "dropout"];

/// Parsed `key=value` file. Blank lines and lines starting with `#` are
/// ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("config line {}: expected key=value", i + 1)));
            };
            let key = k.trim().replace('-', "_");
            if values.insert(key.clone(), v.trim().to_owned()).is_some() {
                return Err(CliError::Usage(format!("config line {}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// Rejects keys outside `known` and the shared `seed`.
    pub fn check_known(&self, known: &[&[&str]]) -> Result<(), CliError> {
        for k in self.values.keys() {
            if k != "seed" && !known.iter().any(|set| set.contains(&k.as_str())) {
                return Err(CliError::Usage(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }

    /// Flag value, else file value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("config key {key}: {e}"))))
            .transpose()
    }

    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("missing --{}", key.replace('_', "-"))))
    }
}

/// Worker count from `MSIN_THREADS`, 1 when unset.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("MSIN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Usage(format!("MSIN_THREADS must be a positive integer, got {v:?}"))),
    }
}

/// Parses arguments and runs the chosen subcommand, writing human-readable
/// output to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, &settings, cli.seed, out),
        Command::Train(a) => cmd_train(&a, &settings, cli.seed, out),
        Command::Eval(a) => cmd_eval(&a, &settings, out),
        Command::Rank(a) => cmd_rank(&a, &settings, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, &settings, cli.seed, out),
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<File>, CliError> {
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))
}

pub fn synth_spec(a: &SynthArgs, s: &Settings, seed: Option<u64>) -> Result<SynthSpec, CliError> {
    let d = SynthSpec::default();
    let planting = match s.pick(a.plant_prob, "plant_prob")? {
        Some(p) => Planting::PerDocument(p),
        None => d.planting,
    };
    let spec = SynthSpec {
        n_days: s.get(a.days, "days", d.n_days)?,
        docs_min: s.get(a.docs_min, "docs_min", d.docs_min)?,
        docs_max: s.get(a.docs_max, "docs_max", d.docs_max)?,
        doc_len_min: s.get(a.doc_len_min, "doc_len_min", d.doc_len_min)?,
        doc_len_max: s.get(a.doc_len_max, "doc_len_max", d.doc_len_max)?,
        background_words: s.get(a.background_words, "background_words", d.background_words)?,
        lexicon_size: s.get(a.lexicon_size, "lexicon_size", d.lexicon_size)?,
        planting,
        phi: s.get(a.phi, "phi", d.phi)?,
        alpha: s.get(a.alpha, "alpha", d.alpha)?,
        sigma: s.get(a.sigma, "sigma", d.sigma)?,
        seed: s.get(seed, "seed", d.seed)?,
        start: s.get(a.start, "start", d.start)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn cmd_synth(a: &SynthArgs, s: &Settings, seed: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    s.check_known(&[SYNTH_KEYS])?;
    let spec = synth_spec(a, s, seed)?;
    let dir = s.get(a.out_dir.clone(), "out_dir", PathBuf::from("synth"))?;
    let (corpus, series) = synth::generate(&spec)?;
    create_dir(&dir)?;
    let corpus_path = dir.join("corpus.jsonl");
    let series_path = dir.join("series.csv");
    let mut w = create_file(&corpus_path)?;
    corpus.write_jsonl(&mut w)?;
    w.flush()?;
    let mut w = create_file(&series_path)?;
    series.write_csv(&mut w)?;
    w.flush()?;
    writeln!(out, "spec {}", serde_json::to_string(&spec).expect("spec serializes"))?;
    writeln!(out, "{}  {}", sha256_file(&corpus_path)?, corpus_path.display())?;
    writeln!(out, "{}  {}", sha256_file(&series_path)?, series_path.display())?;
    Ok(())
}

fn split_rule(a: &DataArgs, s: &Settings, fallback: Option<SplitRule>) -> Result<SplitRule, CliError> {
    let train_until = s.pick(a.train_until, "train_until")?;
    let valid_until = s.pick(a.valid_until, "valid_until")?;
    let fracs = s.pick(a.split_fracs.clone(), "split_fracs")?;
    match (train_until, valid_until, fracs) {
        (Some(_), _, Some(_)) | (_, Some(_), Some(_)) => {
            Err(CliError::Usage("give either split dates or split_fracs, not both".into()))
        }
        (Some(t), Some(v), None) => Ok(SplitRule::Dates {
            train_until: t,
            valid_until: v,
        }),
        (Some(_), None, None) | (None, Some(_), None) => {
            Err(CliError::Usage("train_until and valid_until must be given together".into()))
        }
        (None, None, Some(f)) => {
            let parts: Vec<f64> = f
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Usage(format!("split_fracs: {e}")))?;
            let arr: [f64; 3] = parts
                .try_into()
                .map_err(|_| CliError::Usage("split_fracs needs three values".into()))?;
            Ok(SplitRule::Fractions(arr))
        }
        (None, None, None) => Ok(fallback.unwrap_or_default()),
    }
}

fn read_inputs(a: &DataArgs, s: &Settings) -> Result<(Corpus, Series), CliError> {
    let corpus_path: PathBuf = s.require(a.corpus.clone(), "corpus")?;
    let series_path: PathBuf = s.require(a.series.clone(), "series")?;
    let corpus = Corpus::read_jsonl(open(&corpus_path)?)?;
    let series = Series::read_csv(open(&series_path)?)?;
    Ok((corpus, series))
}

pub fn model_config(a: &ModelArgs, s: &Settings) -> Result<ModelConfig, CliError> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        variant: s.get(a.variant, "variant", d.variant)?,
        d_s: s.get(a.d_s, "d_s", d.d_s)?,
        d_h: s.get(a.d_h, "d_h", d.d_h)?,
        d_w: s.get(a.d_w, "d_w", d.d_w)?,
        d_a: s.pick(a.d_a, "d_a")?,
        vocab_size: s.get(a.vocab_size, "vocab_size", d.vocab_size)?,
        window: s.get(a.window, "window", d.window)?,
        series_dim: d.series_dim,
        max_len: s.get(a.max_len, "max_len", d.max_len)?,
        daily_doc_cap: s.get(a.daily_doc_cap, "daily_doc_cap", d.daily_doc_cap)?,
        dropout: s.get(a.dropout, "dropout", d.dropout)?,
        l1: s.get(a.l1, "l1", d.l1)?,
        l2: s.get(a.l2, "l2", d.l2)?,
        objective: s.get(a.objective, "objective", d.objective)?,
        pool_divisor: s.get(a.pool_divisor, "pool_divisor", d.pool_divisor)?,
    })
}

pub fn train_config(a: &TrainArgs, s: &Settings, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        learning_rate: s.get(a.learning_rate, "learning_rate", d.learning_rate)?,
        batch_size: s.get(a.batch_size, "batch_size", d.batch_size)?,
        max_steps: s.get(a.max_steps, "max_steps", d.max_steps)?,
        clip_norm: s.get(a.clip_norm, "clip_norm", d.clip_norm)?,
        patience: s.get(a.patience, "patience", d.patience)?,
        eval_every: s.get(a.eval_every, "eval_every", d.eval_every)?,
        seed: s.get(seed, "seed", d.seed)?,
        threads: threads_from_env()?,
        ..d
    })
}

fn sample_config(m: &ModelConfig, split: SplitRule) -> SampleConfig {
    SampleConfig {
        window: m.window,
        max_len: m.max_len,
        daily_doc_cap: m.daily_doc_cap,
        split,
    }
}

fn cmd_train(a: &TrainArgs, s: &Settings, seed: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    s.check_known(&[DATA_KEYS, MODEL_KEYS, TRAIN_KEYS])?;
    let mut mcfg = model_config(&a.model, s)?;
    let tcfg = train_config(a, s, seed)?;
    tcfg.validate()?;
    let split = split_rule(&a.data, s, None)?;
    let dir = s.get(a.out_dir.clone(), "out_dir", PathBuf::from("run"))?;
    let embeddings: Option<PathBuf> = s.pick(a.embeddings.clone(), "embeddings")?;
    let budget = s.get(a.search_budget, "search_budget", 0usize)?;
    let search_steps = s.get(a.search_steps, "search_steps", (tcfg.max_steps / 4).max(1))?;

    let (corpus, series) = read_inputs(&a.data, s)?;
    let tokens = corpus_tokens(&corpus, mcfg.max_len);
    let vocab = match &embeddings {
        Some(p) => {
            let words = text::embedding_words(open(p)?)?;
            Vocab::build(tokens.iter().map(String::as_str), mcfg.vocab_size, Some(&|w| words.contains(w)))
        }
        None => Vocab::build(tokens.iter().map(String::as_str), mcfg.vocab_size, None),
    };
    mcfg.vocab_size = vocab.len();
    mcfg.series_dim = series.dim();
    mcfg.validate()?;

    if budget > 0 {
        let search_cfg = TrainConfig {
            max_steps: search_steps,
            ..tcfg.clone()
        };
        let board = train::random_search(&SearchSpace::default(), budget, tcfg.seed, &mcfg, &search_cfg, |m| {
            Ok(make_samples(&corpus, &series, &vocab, &sample_config(&ModelConfig { window: m, ..mcfg.clone() }, split.clone()), None)?)
        })?;
        create_dir(&dir)?;
        let mut w = create_file(&dir.join("leaderboard.json"))?;
        serde_json::to_writer_pretty(&mut w, &board).map_err(std::io::Error::from)?;
        w.flush()?;
        for e in &board {
            writeln!(
                out,
                "search trial {} valid {:.6} d_s={} d_h={} l1={} l2={} dropout={} window={}",
                e.trial, e.valid_loss, e.config.d_s, e.config.d_h, e.config.l1, e.config.l2, e.config.dropout, e.config.window
            )?;
        }
        mcfg = board[0].config.clone();
    }

    let data: Dataset = make_samples(&corpus, &series, &vocab, &sample_config(&mcfg, split.clone()), None)?;
    let r = &data.report;
    writeln!(
        out,
        "samples {} (train {}, valid {}, test {}); skipped days {}, alignment gaps {}, empty documents {}, capped days {}",
        r.samples, r.train, r.valid, r.test, r.skipped_no_docs, r.alignment_gaps, r.empty_documents, r.capped_days
    )?;
    let mut params = ModelParams::init(&mcfg, &mut seeded(tcfg.seed, Stream::Init))?;
    if let Some(p) = &embeddings {
        let table = params.get_mut("embedding").expect("embedding tensor");
        let stats = text::load_embeddings(open(p)?, &vocab, table)?;
        writeln!(out, "embeddings: {} vectors loaded, {} lines skipped", stats.matched, stats.skipped)?;
    }
    writeln!(out, "model {} with {} parameters, vocabulary {}", mcfg.variant.name(), params.num_scalars(), vocab.len())?;

    let started = Instant::now();
    let verbose = a.verbose;
    let mut log = Vec::new();
    let outcome = train::train_observed(params, &data.train, &data.valid, &tcfg, |row| {
        if verbose {
            if let Some(v) = row.valid_loss {
                log.push(format!("step {} valid {v:.6}", row.step));
            }
        }
    })?;
    for line in log {
        writeln!(out, "{line}")?;
    }
    create_dir(&dir)?;
    let ck = Checkpoint {
        params: outcome.params,
        train: tcfg.clone(),
        meta: CheckpointMeta {
            step: outcome.best_step,
            seed: tcfg.seed,
            metric: Some(outcome.best_valid),
            vocab: vocab.words().to_vec(),
            normalizer: Some(data.normalizer.clone()),
            split: Some(split),
        },
    };
    let ck_path = dir.join("checkpoint.msn");
    ck.save(&ck_path)?;
    let mut w = create_file(&dir.join("history.csv"))?;
    train::write_history(&outcome.history, &mut w)?;
    w.flush()?;
    writeln!(
        out,
        "trained {} steps in {:.1}s{}; best valid {:.6} at step {}",
        outcome.steps_run,
        started.elapsed().as_secs_f64(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.best_valid,
        outcome.best_step
    )?;
    writeln!(out, "wrote {} and {}", ck_path.display(), dir.join("history.csv").display())?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Vocab), CliError> {
    let ck = Checkpoint::load(path)?;
    let vocab = Vocab::from_words(ck.meta.vocab.clone())?;
    if vocab.len() != ck.params.config().vocab_size {
        return Err(CliError::Data(format!(
            "checkpoint vocabulary has {} words but the model expects {}",
            vocab.len(),
            ck.params.config().vocab_size
        )));
    }
    Ok((ck, vocab))
}

/// Samples of `corpus`/`series` prepared the way the checkpoint was trained.
fn checkpoint_samples(
    ck: &Checkpoint,
    vocab: &Vocab,
    corpus: &Corpus,
    series: &Series,
    split: SplitRule,
) -> Result<Dataset, CliError> {
    let cfg = ck.params.config();
    if series.dim() != cfg.series_dim {
        return Err(CliError::Data(format!(
            "series has {} value columns, checkpoint expects {}",
            series.dim(),
            cfg.series_dim
        )));
    }
    Ok(make_samples(corpus, series, vocab, &sample_config(cfg, split), ck.meta.normalizer.clone())?)
}

fn cmd_eval(a: &EvalArgs, s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    s.check_known(&[DATA_KEYS, EVAL_KEYS])?;
    let ck_path: PathBuf = s.require(a.checkpoint.clone(), "checkpoint")?;
    let which = s.get(a.split.clone(), "split", "test".to_owned())?;
    let k_max = s.get(a.k_max, "k_max", 5usize)?;
    if k_max == 0 {
        return Err(CliError::Usage("k_max must be at least 1".into()));
    }
    let dir = s.get(a.out_dir.clone(), "out_dir", PathBuf::from("eval"))?;
    let (ck, vocab) = load_checkpoint(&ck_path)?;
    let split = split_rule(&a.data, s, ck.meta.split.clone())?;
    let (corpus, series) = read_inputs(&a.data, s)?;
    let data = checkpoint_samples(&ck, &vocab, &corpus, &series, split)?;
    let samples: Vec<_> = match which.as_str() {
        "test" => data.test,
        "valid" => data.valid,
        "train" => data.train,
        "all" => data.train.into_iter().chain(data.valid).chain(data.test).collect(),
        other => return Err(CliError::Usage(format!("unknown split {other:?} (test, valid, train, all)"))),
    };
    let (report, days) = eval::rank_report(&ck.params, &samples, k_max, threads_from_env()?)?;
    create_dir(&dir)?;
    let mut w = create_file(&dir.join("report.json"))?;
    eval::write_report(&report, &mut w)?;
    w.flush()?;
    let mut w = create_file(&dir.join("days.jsonl"))?;
    eval::write_days(&days, &mut w)?;
    w.flush()?;
    let mut w = create_file(&dir.join("curve.csv"))?;
    eval::write_curve(&report.per_k, &mut w)?;
    w.flush()?;

    writeln!(out, "{} days ({} with ground truth), variant {}", report.days, report.gtd, report.variant)?;
    if report.relevance.available {
        for m in &report.per_k {
            writeln!(out, "k={} precision {:.4} recall {:.4}", m.k, m.pre, m.rec)?;
        }
    } else {
        writeln!(out, "relevance metrics unavailable: {}", report.relevance.reason.as_deref().unwrap_or(""))?;
    }
    let mv = &report.movement;
    let pct = |x: Option<f64>| x.map_or("undefined".to_owned(), |v| format!("{:.4}", v));
    writeln!(
        out,
        "movement accuracy {:.4}; precision up/down {}/{}; recall up/down {}/{}",
        mv.accuracy,
        pct(mv.up.precision),
        pct(mv.down.precision),
        pct(mv.up.recall),
        pct(mv.down.recall)
    )?;
    writeln!(out, "wrote report.json, days.jsonl and curve.csv to {}", dir.display())?;
    Ok(())
}

fn parse_mass(text: &str) -> Result<Vec<f64>, CliError> {
    let mass: Vec<f64> = text
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("inject_mass: {e}")))?;
    if mass.is_empty() || mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(CliError::Usage("inject_mass needs non-negative finite values".into()));
    }
    Ok(mass)
}

/// Ranked listing in one-based document numbering, with `*`
/// marking the selected prefix.
pub fn write_ranking(out: &mut dyn Write, date: Option<NaiveDate>, mass: &[f64], texts: &[String]) -> std::io::Result<()> {
    let selected = select_relevant(mass);
    let covered: f64 = selected.iter().map(|&j| mass[j]).sum();
    if let Some(d) = date {
        write!(out, "date {d}  ")?;
    }
    writeln!(out, "documents {}  selected {} (mass {:.4})", mass.len(), selected.len(), covered)?;
    writeln!(out, "rank  doc  mass    sel  text")?;
    for (r, &j) in rank_by_mass(mass).iter().enumerate() {
        let mark = if selected.contains(&j) { "*" } else { " " };
        let text = texts.get(j).map(String::as_str).unwrap_or("");
        writeln!(out, "{:<4}  {:02}   {:.4}  {}    {}", r + 1, j + 1, mass[j], mark, text)?;
    }
    Ok(())
}

fn cmd_rank(a: &RankArgs, s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    s.check_known(&[RANK_KEYS])?;
    let injected = s.pick(a.inject_mass.clone(), "inject_mass")?.map(|m| parse_mass(&m)).transpose()?;
    let ck_path: Option<PathBuf> = s.pick(a.checkpoint.clone(), "checkpoint")?;
    let date: Option<NaiveDate> = s.pick(a.date, "date")?;
    if let (Some(mass), None, None) = (&injected, &ck_path, date) {
        write_ranking(out, None, mass, &[])?;
        return Ok(());
    }
    let ck_path = ck_path.ok_or_else(|| CliError::Usage("missing --checkpoint".into()))?;
    let (ck, vocab) = load_checkpoint(&ck_path)?;
    let data_args = DataArgs {
        corpus: a.corpus.clone(),
        series: a.series.clone(),
        ..DataArgs::default()
    };
    let (corpus, series) = read_inputs(&data_args, s)?;
    let data = checkpoint_samples(&ck, &vocab, &corpus, &series, SplitRule::Fractions([1.0, 0.0, 0.0]))?;
    let sample = match date {
        Some(d) => data
            .train
            .iter()
            .find(|x| x.window.date == d)
            .ok_or_else(|| CliError::Data(format!("no documents with a full series window on {d}")))?,
        None => data.train.last().expect("make_samples never returns an empty set"),
    };
    let mass = match injected {
        Some(m) => {
            if m.len() != sample.docs.len() {
                return Err(CliError::Usage(format!(
                    "inject_mass has {} values but {} has {} documents",
                    m.len(),
                    sample.window.date,
                    sample.docs.len()
                )));
            }
            m
        }
        None => {
            let (pred, _) = model::predict(&ck.params, sample)?;
            pred.relevance.ok_or_else(|| {
                CliError::Data(format!("variant {} has no document attention to rank", ck.params.config().variant.name()))
            })?
        }
    };
    write_ranking(out, Some(sample.window.date), &mass, sample.docs.texts())?;
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, s: &Settings, seed: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    s.check_known(&[GRADCHECK_KEYS])?;
    let dropout = s.get(a.dropout, "dropout", 0.0f64)?;
    let seed = s.get(seed, "seed", GRAD_CHECK_SEED)?;
    let variants: Vec<Variant> = match s.pick(a.variant, "variant")? {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let started = Instant::now();
    let mut worst = 0.0f64;
    writeln!(out, "variant   tensor                  worst_rel_err  tape_grad      fd_grad")?;
    for v in variants {
        let cfg = ModelConfig {
            dropout,
            ..ModelConfig::tiny(v)
        };
        let report = match model::model_grad_check(&cfg, seed) {
            Ok(r) => r,
            Err(ModelCheckError::Dropout(p)) => {
                return Err(CliError::Usage(format!(
                    "gradient check is not deterministic with dropout {p}; use --dropout 0"
                )))
            }
            Err(ModelCheckError::Model(e)) => return Err(e.into()),
            Err(ModelCheckError::Check(e)) => return Err(CliError::Numeric(e.to_string())),
        };
        for c in &report.per_tensor {
            writeln!(
                out,
                "{:<9} {:<23} {:<14.3e} {:<14.6e} {:.6e}",
                v.name(),
                c.name,
                c.worst_rel_err,
                c.tape_grad,
                c.fd_grad
            )?;
        }
        worst = worst.max(report.max_rel_err);
    }
    let pass = worst < 1e-4;
    writeln!(
        out,
        "{}: worst relative error {worst:.3e} (limit 1e-4, seed {seed}) in {:.1}s",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: worst relative error {worst:.3e}")))
    }
}
