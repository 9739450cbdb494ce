//! `fsdm` command line: train, evaluate, convert and serve.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! input, 3 non-finite training loss, 4 checkpoint mismatch.

pub mod config;
pub mod http;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use fsdm::corpus::{load_corpus, make_turn_examples, save_canonical, CanonicalFile, CorpusConfig, CorpusError, CorpusFormat, Split};
use fsdm::kb::{Kb, KbError};
use fsdm::metrics::{evaluate, EvalReport};
use fsdm::model::{DecodeOptions, Fsdm, ModelError};
use fsdm::numcore::CheckpointError;
use fsdm::service::DialogueService;
use fsdm::trainer::{build_model, open_log, run_inference, BeliefFeed, DevSet, TrainError, Trainer};

use config::FileConfig;

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<KbError> for CliError {
    fn from(e: KbError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Checkpoint(CheckpointError::Io { .. }) | ModelError::Config(_) | ModelError::Corpus(_) => Self::config(e.to_string()),
            ModelError::Checkpoint(_) | ModelError::Mismatch(_) => Self::mismatch(e.to_string()),
            ModelError::Num(_) | ModelError::EmptyInput => Self::runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::NonFinite { .. } => Self { code: 3, message: e.to_string() },
            TrainError::Corpus(_) | TrainError::Config(_) => Self::config(e.to_string()),
            TrainError::Io { .. } => Self::runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fsdm", version, about = "Train, evaluate and serve a task-oriented dialogue model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a corpus and write the best checkpoint to `<out>/best`.
    Train(TrainArgs),
    /// Run a checkpoint over a split and print the metric report as JSON.
    Evaluate(EvalArgs),
    /// Serve the /v1 HTTP API.
    Serve(ServeArgs),
    /// Write a corpus in the canonical JSON format.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "FSDM_CONFIG")]
    pub config: PathBuf,
    /// Output directory (checkpoints and `train_log.jsonl`).
    #[arg(long, env = "FSDM_OUT_DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "FSDM_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "FSDM_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "FSDM_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "FSDM_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "FSDM_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// train, dev or test (default test).
    #[arg(long, env = "FSDM_SPLIT")]
    pub split: Option<Split>,
    /// predicted or gold (default predicted).
    #[arg(long, env = "FSDM_BELIEF_FEED")]
    pub belief_feed: Option<BeliefFeed>,
    #[arg(long, env = "FSDM_BEAM_WIDTH")]
    pub beam_width: Option<usize>,
    /// Also write the per-turn transcripts here.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "FSDM_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "FSDM_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// KB JSON; defaults to the KB of the configured corpus.
    #[arg(long, env = "FSDM_KB")]
    pub kb: Option<PathBuf>,
    #[arg(long, env = "FSDM_PORT")]
    pub port: Option<u16>,
    #[arg(long, env = "FSDM_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "FSDM_BEAM_WIDTH")]
    pub beam_width: Option<usize>,
    /// Idle seconds before a session is dropped.
    #[arg(long, env = "FSDM_SESSION_TTL", default_value_t = 1800)]
    pub session_ttl: u64,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long, env = "FSDM_CONFIG")]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub const DEFAULT_PORT: u16 = 8080;

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => {
            let report = evaluate_cmd(&a)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Serve(a) => serve(a),
        Command::Convert(a) => convert(a),
    }
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(&a.config)?;
    let mut config = file.train_config()?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        config.learning_rate = lr;
    }
    config.validate()?;
    let out = a.out.or(file.out_dir.clone()).ok_or_else(|| CliError::config("no output directory (--out, FSDM_OUT_DIR or `out_dir`)"))?;
    let corpus = load_corpus(file.corpus()?)?;
    let examples = make_turn_examples(&corpus.train, &corpus.schema);
    let model = build_model(&config, &corpus.schema, &examples)?;
    log::info!("{} parameters, vocabulary {}, {} training turns", model.num_parameters(), model.vocab.len(), examples.len());
    std::fs::create_dir_all(&out).map_err(|e| CliError::runtime(format!("creating {}: {e}", out.display())))?;
    let mut log = open_log(&out.join("train_log.jsonl"))?;
    let mut trainer = Trainer::new(model, config)?;
    let dev = (!corpus.dev.is_empty()).then_some(DevSet { dialogues: &corpus.dev, kb: &corpus.kb });
    let outcome = trainer.fit(&examples, dev, Some(&out), &mut log)?;
    println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub split: Split,
    pub belief_feed: BeliefFeed,
    pub dialogues: usize,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn load_checkpoint(path: &Path) -> Result<Fsdm<f32>, CliError> {
    Ok(Fsdm::<f32>::load(path)?.0)
}

fn check_schema(model: &Fsdm<f32>, corpus: &CorpusConfig, schema: &fsdm::corpus::SlotSchema) -> Result<(), CliError> {
    if &model.schema != schema {
        return Err(CliError::mismatch(format!("checkpoint slot schema differs from the {} corpus schema", corpus.train.display())));
    }
    Ok(())
}

pub fn evaluate_cmd(a: &EvalArgs) -> Result<EvalOutput, CliError> {
    let file = FileConfig::load_opt(a.config.as_deref())?;
    let ckpt = a.checkpoint.clone().or(file.checkpoint.clone()).ok_or_else(|| CliError::config("no checkpoint (--checkpoint, FSDM_CHECKPOINT or `checkpoint`)"))?;
    let split = a.split.or(file.split).unwrap_or(Split::Test);
    let feed = a.belief_feed.or(file.belief_feed).unwrap_or_default();
    let beam_width = a.beam_width.or(file.beam_width).unwrap_or(1);
    let corpus_config = file.corpus()?;
    let corpus = load_corpus(corpus_config)?;
    let model = load_checkpoint(&ckpt)?;
    check_schema(&model, corpus_config, &corpus.schema)?;
    let dialogues = corpus.split(split);
    let outcomes = run_inference(&model, dialogues, &corpus.kb, feed, &DecodeOptions { beam_width })?;
    if let Some(path) = &a.transcripts {
        let text = serde_json::to_string_pretty(&outcomes).expect("transcripts serialize");
        std::fs::write(path, text).map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
    }
    let report = evaluate(&outcomes, &corpus.kb, &corpus.schema);
    Ok(EvalOutput { split, belief_feed: feed, dialogues: dialogues.len(), report })
}

/// Builds the service a `serve` invocation would run.
pub fn build_service(a: &ServeArgs) -> Result<(DialogueService, u16), CliError> {
    let file = FileConfig::load_opt(a.config.as_deref())?;
    let ckpt = a.checkpoint.clone().or(file.checkpoint.clone()).ok_or_else(|| CliError::config("no checkpoint (--checkpoint, FSDM_CHECKPOINT or `checkpoint`)"))?;
    let model = load_checkpoint(&ckpt)?;
    let kb = match a.kb.clone().or(file.kb.clone()) {
        Some(p) => Kb::load(&p)?,
        None => match &file.corpus {
            Some(c) => {
                let corpus = load_corpus(c)?;
                check_schema(&model, c, &corpus.schema)?;
                corpus.kb
            }
            None => return Err(CliError::config("no KB (--kb, FSDM_KB, `kb` or a `corpus` section)")),
        },
    };
    let beam_width = a.beam_width.or(file.beam_width).unwrap_or(1);
    if beam_width == 0 {
        return Err(CliError::config("beam width must be at least 1"));
    }
    let port = a.port.or(file.port).unwrap_or(DEFAULT_PORT);
    let svc = DialogueService::new(model, kb, DecodeOptions { beam_width }).with_ttl(Duration::from_secs(a.session_ttl));
    Ok((svc, port))
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let (svc, port) = build_service(&a)?;
    let addr = format!("{}:{port}", a.host);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| CliError::config(format!("binding {addr}: {e}")))?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, http::router(Arc::new(svc)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::runtime(e.to_string()))
    })
}

fn convert(a: ConvertArgs) -> Result<(), CliError> {
    let file = FileConfig::load(&a.config)?;
    let corpus = load_corpus(file.corpus()?)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::runtime(format!("creating {}: {e}", a.out.display())))?;
    for split in Split::ALL {
        let data = CanonicalFile { schema: corpus.schema.clone(), dialogues: corpus.split(split).to_vec() };
        save_canonical(&a.out.join(format!("{}.json", split.name())), &data)?;
    }
    let write = |name: &str, value: serde_json::Value| {
        let path = a.out.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&value).expect("json") + "\n").map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
    };
    write("kb.json", corpus.kb.to_json())?;
    let canonical = CorpusConfig {
        format: CorpusFormat::Canonical,
        train: "train.json".into(),
        dev: Some("dev.json".into()),
        test: Some("test.json".into()),
        kb: Some("kb.json".into()),
        schema: None,
        manifest: file.corpus()?.manifest,
    };
    write("corpus.json", serde_json::json!({ "corpus": canonical }))?;
    println!("{}", serde_json::json!({ "train": corpus.train.len(), "dev": corpus.dev.len(), "test": corpus.test.len(), "kb_records": corpus.kb.num_records() }));
    Ok(())
}
