//! Joint optimization of the four losses, checkpointing and the dialogue-level
//! inference loop used for evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_vocab, tokenize, BeliefState, CorpusError, Dialogue, SlotSchema, TurnExample, Vocab};
use crate::kb::{lexicalize, Kb};
use crate::metrics::{evaluate, DialogueOutcome, EvalReport, Prf, TurnOutcome};
use crate::model::{load_word_vectors, DecodeOptions, Dropout, Fsdm, LossBundle, LossWeights, ModelConfig, ModelError};
use crate::numcore::{adam_step, AdamConfig, Gradients, NumError, OptimizerState, Real, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite value at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: u64, detail: String },
}

/// Where the previous turn's belief and response come from at evaluation time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeliefFeed {
    #[default]
    Predicted,
    Gold,
}

impl std::str::FromStr for BeliefFeed {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "predicted" => Ok(Self::Predicted),
            "gold" => Ok(Self::Gold),
            _ => Err(format!("belief feed must be `predicted` or `gold`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub loss_weights: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_belief_feed: BeliefFeed,
    /// Training tokens seen fewer times map to `<unk>`.
    pub min_count: usize,
    /// Epochs without a better validation score before stopping.
    pub patience: usize,
    pub beam_width: usize,
    pub max_value_len: usize,
    pub max_response_len: usize,
    pub threshold: f64,
    /// Optional `token v1 .. vd` word-vector file.
    pub embeddings: Option<PathBuf>,
    /// Stop once the mean training loss of an epoch falls below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::camrest()
    }
}

impl TrainConfig {
    pub fn camrest() -> Self {
        let m = ModelConfig::default();
        Self {
            learning_rate: 2.5e-4,
            dropout_rate: 0.5,
            embed_dim: m.embed_dim,
            hidden_dim: 128,
            attn_dim: 128,
            loss_weights: LossWeights::camrest(),
            batch_size: 32,
            epochs: 100,
            seed: 1,
            eval_belief_feed: BeliefFeed::Predicted,
            min_count: 2,
            patience: 5,
            beam_width: 1,
            max_value_len: m.max_value_len,
            max_response_len: m.max_response_len,
            threshold: m.threshold,
            embeddings: None,
            target_loss: None,
        }
    }

    pub fn kvret() -> Self {
        Self { dropout_rate: 0.2, hidden_dim: 256, attn_dim: 256, loss_weights: LossWeights::kvret(), ..Self::camrest() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let w = &self.loss_weights;
        if [w.inf, w.req, w.resp_slot, w.resp].iter().any(|a| a.is_nan() || *a < 0.0) {
            return Err(TrainError::Config(format!("loss weights must be nonnegative, got {w:?}")));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.min_count == 0 || self.beam_width == 0 {
            return Err(TrainError::Config("batch_size, min_count and beam_width must be positive".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attn_dim: self.attn_dim,
            dropout: self.dropout_rate,
            max_value_len: self.max_value_len,
            max_response_len: self.max_response_len,
            threshold: self.threshold,
        }
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions { beam_width: self.beam_width }
    }
}

/// Fresh model for `examples`: vocabulary from the training tokens, then
/// random weights, with word vectors loaded when configured.
pub fn build_model(config: &TrainConfig, schema: &SlotSchema, examples: &[TurnExample]) -> Result<Fsdm<f32>, TrainError> {
    config.validate()?;
    let vocab = build_vocab(examples, schema, config.min_count)?;
    init_model(config, schema, vocab)
}

pub fn init_model(config: &TrainConfig, schema: &SlotSchema, vocab: Vocab) -> Result<Fsdm<f32>, TrainError> {
    let mut model = Fsdm::new(config.model_config(), schema.clone(), vocab, config.seed)?;
    if let Some(path) = &config.embeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xe3b);
        let (table, hits) = load_word_vectors(path, &model.vocab, config.embed_dim, &mut rng)?;
        log::info!("loaded {hits} of {} word vectors from {}", model.vocab.len(), path.display());
        model.set_embedding(table)?;
    }
    Ok(model)
}

/// Seed of the dropout mask for one example of one epoch.
fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((epoch as u64) << 32) ^ index as u64
}

/// Loss and gradients of one example.
pub fn example_gradients<F: Real>(
    model: &Fsdm<F>,
    example: &TurnExample,
    weights: &LossWeights,
    drop: &mut Dropout,
) -> Result<(LossBundle, Gradients<F>), ModelError> {
    let mut tape = Tape::new(&model.params);
    let fwd = model.forward_example(&mut tape, example, weights, drop, false)?;
    let grads = tape.backward(fwd.losses.total)?;
    Ok((LossBundle::from_tape(&tape, &fwd.losses), grads))
}

/// Loss of one example without dropout.
pub fn example_loss<F: Real>(model: &Fsdm<F>, example: &TurnExample, weights: &LossWeights) -> Result<LossBundle, ModelError> {
    let mut tape = Tape::new(&model.params);
    let fwd = model.forward_example(&mut tape, example, weights, &mut Dropout::eval(), false)?;
    Ok(LossBundle::from_tape(&tape, &fwd.losses))
}

fn mean_bundle(items: &[LossBundle]) -> LossBundle {
    let n = items.len().max(1) as f64;
    let sum = |f: fn(&LossBundle) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBundle { inf: sum(|b| b.inf), req: sum(|b| b.req), resp_slot: sum(|b| b.resp_slot), resp: sum(|b| b.resp), total: sum(|b| b.total) }
}

/// Mean evaluation-mode loss over `examples`.
pub fn mean_loss<F: Real>(model: &Fsdm<F>, examples: &[TurnExample], weights: &LossWeights) -> Result<LossBundle, ModelError> {
    let losses = examples.par_iter().map(|ex| example_loss(model, ex, weights)).collect::<Result<Vec<_>, _>>()?;
    Ok(mean_bundle(&losses))
}

/// Metric values of an evaluation report, without the per-dialogue detail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub inf: Option<Prf>,
    pub req: Option<Prf>,
    pub bleu: Option<f64>,
    pub emr: Option<f64>,
    pub succ_f1: Option<f64>,
}

impl From<&EvalReport> for MetricSummary {
    fn from(r: &EvalReport) -> Self {
        Self { inf: r.inf, req: r.req, bleu: r.bleu, emr: r.emr, succ_f1: r.succ_f1 }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<LossBundle>,
    pub metrics: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub last_train_loss: LossBundle,
    pub stopped_early: bool,
}

/// Validation data for model selection.
pub struct DevSet<'a> {
    pub dialogues: &'a [Dialogue],
    pub kb: &'a Kb,
}

pub struct Trainer {
    pub model: Fsdm<f32>,
    pub config: TrainConfig,
    optimizer: OptimizerState<f32>,
    steps: u64,
}

impl Trainer {
    pub fn new(model: Fsdm<f32>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
        let optimizer = OptimizerState::new(adam, &model.params).map_err(ModelError::from)?;
        Ok(Self { model, config, optimizer, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One Adam update on the mean loss of `batch`; `seeds` drive the dropout
    /// masks. Examples run in parallel, gradients are summed in batch order.
    pub fn step(&mut self, batch: &[&TurnExample], seeds: &[u64], epoch: usize) -> Result<LossBundle, TrainError> {
        assert_eq!(batch.len(), seeds.len());
        if batch.is_empty() {
            return Ok(mean_bundle(&[]));
        }
        let model = &self.model;
        let (weights, rate) = (self.config.loss_weights, self.config.dropout_rate);
        let results = batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(ex, &seed)| {
                let mut drop = if rate > 0.0 { Dropout::train(rate, seed) } else { Dropout::eval() };
                example_gradients(model, ex, &weights, &mut drop)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut total = Gradients::new(model.params.len());
        let mut losses = Vec::with_capacity(results.len());
        for (loss, g) in &results {
            total.accumulate(g);
            losses.push(*loss);
        }
        total.scale(1.0 / batch.len() as f32);
        let loss = mean_bundle(&losses);
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite { epoch, step: self.steps, detail: format!("loss {}", loss.total) });
        }
        match adam_step(&mut self.model.params, &total, &mut self.optimizer) {
            Err(NumError::NonFinite { param, index, value }) => {
                return Err(TrainError::NonFinite { epoch, step: self.steps, detail: format!("gradient {param}[{index}] = {value}") })
            }
            r => r.map_err(ModelError::from)?,
        }
        self.steps += 1;
        Ok(loss)
    }

    /// One pass over `examples` in a seeded shuffled order; returns the mean batch loss.
    pub fn epoch(&mut self, examples: &[TurnExample], epoch: usize) -> Result<LossBundle, TrainError> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64)));
        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TurnExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| example_seed(self.config.seed, epoch, i)).collect();
            losses.push(self.step(&batch, &seeds, epoch)?);
        }
        Ok(mean_bundle(&losses))
    }

    fn checkpoint_extra(&self, epoch: usize, score: Option<f64>) -> serde_json::Value {
        serde_json::json!({ "train_config": self.config, "epoch": epoch, "score": score, "steps": self.steps })
    }

    pub fn save(&self, dir: &Path, epoch: usize, score: Option<f64>) -> Result<(), TrainError> {
        Ok(self.model.save(dir, self.checkpoint_extra(epoch, score))?)
    }

    /// Trains for up to `config.epochs` epochs.
    ///
    /// With a dev set, each epoch is scored by success F1 plus BLEU and the best
    /// model is written to `out_dir/best`; training stops after `patience`
    /// epochs without improvement. Without one, `out_dir/best` holds the latest
    /// epoch. On a non-finite loss the weights from before the failing step
    /// are written to `out_dir/last_good` and the error is returned.
    pub fn fit(
        &mut self,
        train: &[TurnExample],
        dev: Option<DevSet<'_>>,
        out_dir: Option<&Path>,
        log: &mut dyn Write,
    ) -> Result<FitOutcome, TrainError> {
        let io = |path: PathBuf| move |source| TrainError::Io { path, source };
        let mut best: Option<(f64, usize)> = None;
        let mut stagnant = 0;
        let mut outcome = FitOutcome { epochs_run: 0, best_epoch: 0, best_score: None, last_train_loss: mean_bundle(&[]), stopped_early: false };
        for epoch in 1..=self.config.epochs {
            let loss = match self.epoch(train, epoch) {
                Ok(l) => l,
                Err(e @ TrainError::NonFinite { .. }) => {
                    if let Some(dir) = out_dir {
                        self.save(&dir.join("last_good"), epoch, None)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            outcome.epochs_run = epoch;
            outcome.last_train_loss = loss;
            let record = LogRecord { epoch, split: "train".into(), loss: Some(loss), metrics: None };
            writeln!(log, "{}", serde_json::to_string(&record).expect("serializable")).map_err(io("training log".into()))?;
            log::info!("epoch {epoch}: train loss {:.5}", loss.total);

            let mut improved = false;
            if let Some(dev) = &dev {
                let outcomes = run_inference(&self.model, dev.dialogues, dev.kb, self.config.eval_belief_feed, &self.config.decode_options())?;
                let report = evaluate(&outcomes, dev.kb, &self.model.schema);
                let score = report.selection_score();
                let record = LogRecord { epoch, split: "dev".into(), loss: None, metrics: Some(MetricSummary::from(&report)) };
                writeln!(log, "{}", serde_json::to_string(&record).expect("serializable")).map_err(io("training log".into()))?;
                log::info!("epoch {epoch}: dev score {score:.4}");
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, epoch));
                    improved = true;
                    stagnant = 0;
                } else {
                    stagnant += 1;
                }
            } else {
                best = Some((f64::NAN, epoch));
                improved = true;
            }
            if improved {
                if let Some(dir) = out_dir {
                    self.save(&dir.join("best"), epoch, best.map(|b| b.0).filter(|s| !s.is_nan()))?;
                }
            }
            if self.config.target_loss.is_some_and(|t| loss.total < t) {
                outcome.stopped_early = true;
                break;
            }
            if dev.is_some() && stagnant >= self.config.patience {
                outcome.stopped_early = true;
                break;
            }
        }
        if let Some((score, epoch)) = best {
            outcome.best_epoch = epoch;
            outcome.best_score = Some(score).filter(|s| !s.is_nan());
        }
        Ok(outcome)
    }
}

/// Opens the line-delimited JSON training log at `path`.
pub fn open_log(path: &Path) -> Result<BufWriter<File>, TrainError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_path_buf(), source })?;
    }
    let f = File::create(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    Ok(BufWriter::new(f))
}

/// Runs the model over whole dialogues turn by turn. Each turn's previous
/// belief and response come from the model's own output (`Predicted`) or from
/// the annotations (`Gold`). Dialogues run in parallel.
pub fn run_inference<F: Real>(
    model: &Fsdm<F>,
    dialogues: &[Dialogue],
    kb: &Kb,
    feed: BeliefFeed,
    opts: &DecodeOptions,
) -> Result<Vec<DialogueOutcome>, ModelError> {
    dialogues.par_iter().map(|d| infer_dialogue(model, d, kb, feed, opts)).collect()
}

pub fn infer_dialogue<F: Real>(
    model: &Fsdm<F>,
    dialogue: &Dialogue,
    kb: &Kb,
    feed: BeliefFeed,
    opts: &DecodeOptions,
) -> Result<DialogueOutcome, ModelError> {
    let mut prev_response: Vec<String> = Vec::new();
    let mut prev_belief = BeliefState::new();
    let mut turns = Vec::with_capacity(dialogue.turns.len());
    for turn in &dialogue.turns {
        let user = tokenize(&turn.user);
        let p = model.predict_turn(&prev_response, &prev_belief, &user, kb, opts)?;
        let gold_response = tokenize(&turn.agent_delex);
        let records: Vec<_> = p.kb_results.iter().collect();
        let lexicalized = lexicalize(&p.response, &records, &p.belief);
        (prev_response, prev_belief) = match feed {
            BeliefFeed::Predicted => (p.response.clone(), p.belief.clone()),
            BeliefFeed::Gold => (gold_response.clone(), turn.belief.clone()),
        };
        turns.push(TurnOutcome {
            user: turn.user.clone(),
            gold_belief: turn.belief.clone(),
            pred_belief: p.belief,
            gold_response,
            pred_response: p.response,
            match_count: p.match_count,
            lexicalized,
        });
    }
    Ok(DialogueOutcome { id: dialogue.id.clone(), turns })
}
