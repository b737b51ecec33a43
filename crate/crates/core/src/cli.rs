//! The `calm` command line: corpus generation, training, evaluation,
//! reflection demos and plots. Every failure ends in one JSON line on
//! stderr and a nonzero exit code.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, config_hash, sha256_hex};
use crate::config::{RunConfig, SEED_ENV};
use crate::corpus::{generate_corpus, read_jsonl, split_indices, write_jsonl, CorpusSpec, Example};
use crate::error::{CalmError, Result};
use crate::eval::{embed_all, evaluate, EvalReport};
use crate::plots::{emit_plots, EmbeddingDump, EMBEDDINGS_FILE, METRICS_FILE, ROUTING_FILE};
use crate::train::{routing_stats, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "calm", version, about = "Cultural alignment training and evaluation on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Corpus {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus and write a checkpoint with metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Independent runs with consecutive seeds, summarized as mean and std.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Evaluate a checkpoint on the test split of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Show the reflective trace of one example.
    ReflectDemo {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Example as inline JSON or a path to a JSON file.
        #[arg(long)]
        example: String,
        /// Optional example whose identity replaces the input's own.
        #[arg(long)]
        identity: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render plots and their CSVs from a training output directory.
    Plots {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit code of an error.
pub fn exit_code(e: &CalmError) -> i32 {
    match e {
        CalmError::Config(_) | CalmError::MissingArtifact(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Single-line JSON rendering of an error.
pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Results go to files and stdout; errors go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            eprint!("{}", e.render());
            return EXIT_USAGE;
        }
    };
    let seed_env = std::env::var(SEED_ENV).ok();
    match dispatch(cli.command, seed_env.as_deref()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, seed_env: Option<&str>) -> Result<()> {
    match cmd {
        Command::Corpus { spec, out } => corpus_command(&spec, &out, seed_env),
        Command::Train {
            config,
            corpus,
            out,
            runs,
        } => train_command(&config, &corpus, &out, runs, seed_env),
        Command::Eval {
            checkpoint,
            corpus,
            report,
        } => eval_command(&checkpoint, &corpus, &report),
        Command::ReflectDemo {
            checkpoint,
            example,
            identity,
            seed,
        } => reflect_command(&checkpoint, &example, identity.as_deref(), seed),
        Command::Plots { metrics, out } => {
            let out = out.unwrap_or_else(|| metrics.join("plots"));
            let files = emit_plots(&metrics, &out)?;
            for p in files.csv.iter().chain(&files.svg) {
                emit(&p.display().to_string())?;
            }
            Ok(())
        }
    }
}

/// Manifest written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub corpus_sha256: Option<String>,
    pub files: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CalmError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CalmError::Config(format!("{}: {e}", path.display())))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Example>> {
    let f = File::open(path).map_err(|e| CalmError::Input(format!("cannot open {}: {e}", path.display())))?;
    read_jsonl(BufReader::new(f))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn corpus_command(spec_path: &Path, out: &Path, seed_env: Option<&str>) -> Result<()> {
    let mut spec: CorpusSpec = read_config(spec_path)?;
    if let Some(v) = seed_env {
        spec.seed = v
            .trim()
            .parse()
            .map_err(|_| CalmError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
    }
    spec.validate()?;
    let corpus = generate_corpus(&spec)?;
    fs::create_dir_all(out)?;
    let path = out.join("corpus.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    write_jsonl(&mut w, &corpus)?;
    w.flush()?;
    drop(w);
    write_json(&out.join("corpus-spec.json"), &spec)?;
    let manifest = RunManifest {
        version: checkpoint::version(),
        command: "corpus".into(),
        seed: spec.seed,
        config_hash: config_hash(&spec)?,
        corpus_sha256: Some(file_sha256(&path)?),
        files: vec!["corpus.jsonl".into(), "corpus-spec.json".into()],
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    emit(&path.display().to_string())?;
    Ok(())
}

/// Mean and sample standard deviation of one metric across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunsSummary {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub knn_accuracy: MeanStd,
    pub linear_accuracy: MeanStd,
    pub task_macro_f1: MeanStd,
    pub task_accuracy: MeanStd,
    pub correction_rate: MeanStd,
    pub p_m: MeanStd,
}

impl RunsSummary {
    pub fn of(seeds: Vec<u64>, reports: &[EvalReport]) -> Self {
        let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            runs: reports.len(),
            seeds,
            knn_accuracy: col(|r| r.probe.acc),
            linear_accuracy: col(|r| r.linear_probe.acc),
            task_macro_f1: col(|r| r.macro_f1),
            task_accuracy: col(|r| r.task_accuracy),
            correction_rate: col(|r| r.correction_rate),
            p_m: col(|r| r.p_m),
        }
    }
}

/// One training run into `out`; returns the test-split report.
pub fn train_run(cfg: &RunConfig, corpus: &[Example], corpus_sha: &str, out: &Path) -> Result<EvalReport> {
    let seed = cfg.train.seed;
    let outcome = train(&cfg.model, &cfg.train, corpus)?;
    fs::create_dir_all(out)?;
    checkpoint::save(
        &out.join("checkpoint"),
        &cfg.model,
        &outcome.params,
        seed,
        Some(&cfg.train),
        Some(&cfg.eval),
    )?;
    write_json(&out.join(METRICS_FILE), &outcome.history)?;
    write_json(&out.join(ROUTING_FILE), &outcome.routing)?;
    let test: Vec<&Example> = outcome.splits[2].iter().map(|&i| &corpus[i]).collect();
    let dump = EmbeddingDump {
        culture_ids: test.iter().map(|e| e.culture_id).collect(),
        embeddings: embed_all(&outcome.model, &outcome.params, &test)?,
    };
    write_json(&out.join(EMBEDDINGS_FILE), &dump)?;
    let routing = routing_stats(&outcome.model, &outcome.params, &test, cfg.train.batch_size, cfg.eval.seed)?;
    let report = evaluate(&outcome.model, &outcome.params, &test, routing, &cfg.eval)?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("run-config.json"), cfg)?;
    let manifest = RunManifest {
        version: checkpoint::version(),
        command: "train".into(),
        seed,
        config_hash: config_hash(cfg)?,
        corpus_sha256: Some(corpus_sha.to_string()),
        files: [
            "checkpoint/params.bin",
            "checkpoint/manifest.json",
            METRICS_FILE,
            ROUTING_FILE,
            EMBEDDINGS_FILE,
            "report.json",
            "run-config.json",
        ]
        .map(String::from)
        .to_vec(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(report)
}

fn train_command(config: &Path, corpus_path: &Path, out: &Path, runs: usize, seed_env: Option<&str>) -> Result<()> {
    if runs == 0 {
        return Err(CalmError::Config("--runs must be >= 1".into()));
    }
    let cfg = RunConfig::from_path(config)?;
    let seed = cfg.resolve_seed(seed_env)?;
    let corpus = load_corpus(corpus_path)?;
    let sha = file_sha256(corpus_path)?;
    if runs == 1 {
        let report = train_run(&cfg.with_seed(seed), &corpus, &sha, out)?;
        emit(&serde_json::to_string(&report.probe)?)?;
        return Ok(());
    }
    let seeds: Vec<u64> = (0..runs as u64).map(|i| seed.wrapping_add(i)).collect();
    let mut reports = Vec::with_capacity(runs);
    for (i, &s) in seeds.iter().enumerate() {
        reports.push(train_run(&cfg.with_seed(s), &corpus, &sha, &out.join(format!("run-{i}")))?);
    }
    let summary = RunsSummary::of(seeds, &reports);
    write_json(&out.join("runs-summary.json"), &summary)?;
    emit(&serde_json::to_string(&summary)?)?;
    Ok(())
}

fn eval_command(ckpt: &Path, corpus_path: &Path, report_path: &Path) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let corpus = load_corpus(corpus_path)?;
    let train_cfg = ck.manifest.train.clone().unwrap_or_default();
    let opts = ck.manifest.eval.clone().unwrap_or_default();
    for ex in &corpus {
        ck.model.check_example(ex)?;
    }
    let splits = split_indices(&corpus, train_cfg.split)?;
    let test: Vec<&Example> = splits[2].iter().map(|&i| &corpus[i]).collect();
    let routing = routing_stats(&ck.model, &ck.params, &test, train_cfg.batch_size, opts.seed)?;
    let report = evaluate(&ck.model, &ck.params, &test, routing, &opts)?;
    write_json(report_path, &report)?;
    emit(&serde_json::to_string(&report.probe)?)?;
    Ok(())
}

/// Writes one line to stdout; a closed pipe is not an error.
fn emit(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

/// Parses an example given inline as JSON or as a path to a JSON file.
pub fn parse_example(arg: &str) -> Result<Example> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| CalmError::Input(format!("cannot read example {arg}: {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| CalmError::Input(format!("invalid example: {e}")))
}

fn reflect_command(ckpt: &Path, example: &str, identity: Option<&str>, seed: u64) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let ex = parse_example(example)?;
    ck.model.check_example(&ex)?;
    let trace = match identity {
        Some(id) => {
            let other = parse_example(id)?;
            ck.model.check_example(&other)?;
            ck.model.reflect_with_identity(&ck.params, &ex.tokens, &other.tokens, seed)?
        }
        None => ck.model.reflect(&ck.params, &ex.tokens, seed)?,
    };
    emit(&serde_json::to_string(&trace)?)?;
    Ok(())
}
