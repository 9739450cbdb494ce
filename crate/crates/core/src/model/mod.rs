//! The dialogue network: shared embeddings, input encoder, per-slot
//! informable value decoders, requestable and response-slot classifiers, and
//! the copy-gated response decoder.

mod decode;
mod embeddings;
mod forward;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{end_marker, start_symbol, CorpusError, SlotSchema, Vocab, EOS_ID, GO_ID, PAD_ID, UNK_ID};
use crate::kb::MATCH_BINS;
use crate::numcore::{
    init_uniform, load_checkpoint, save_checkpoint, AttnParams, CheckpointError, GruParams, NumError, ParamId, ParamStore,
    Real, INIT_RANGE,
};

pub use decode::{word_copy_probability, DecodeOptions, TurnPrediction};
pub use embeddings::load_word_vectors;
pub use forward::{Dropout, Encoded, LossBundle, LossVars, LossWeights, TurnForward};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("encoder input is empty")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub dropout: f64,
    /// Longest informable value, in tokens.
    pub max_value_len: usize,
    /// Longest response, in tokens.
    pub max_response_len: usize,
    /// Decision threshold for both slot classifiers.
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            hidden_dim: 128,
            attn_dim: 128,
            dropout: 0.5,
            max_value_len: 8,
            max_response_len: 50,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.max_value_len == 0 || self.max_response_len == 0 {
            return Err(ModelError::Config("maximum lengths must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ModelError::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ClassifierParams {
    pub gru: GruParams,
    pub attn: AttnParams,
    pub out: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ModelParams {
    pub embedding: ParamId,
    pub encoder: GruParams,
    pub inf_gru: GruParams,
    pub inf_attn: AttnParams,
    pub inf_gen: ParamId,
    pub inf_copy: ParamId,
    pub req: ClassifierParams,
    pub resp_slot: ClassifierParams,
    pub resp_gru: GruParams,
    pub resp_attn_enc: AttnParams,
    pub resp_attn_belief: AttnParams,
    pub resp_gen: ParamId,
    pub resp_copy: ParamId,
}

/// Vocabulary ids of the schema's structural tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SlotIds {
    pub go: Vec<usize>,
    pub end: Vec<usize>,
    pub req: Vec<usize>,
    pub placeholder: Vec<usize>,
}

/// A model instance: configuration, schema, vocabulary and weights.
#[derive(Debug, Clone)]
pub struct Fsdm<F: Real> {
    pub config: ModelConfig,
    pub schema: SlotSchema,
    pub vocab: Vocab,
    pub params: ParamStore<F>,
    pub(crate) ids: ModelParams,
    pub(crate) slot_ids: SlotIds,
    /// Per informable slot: which vocabulary entries its decoder may emit.
    pub(crate) inf_allowed: Vec<Arc<[bool]>>,
    pub(crate) resp_allowed: Arc<[bool]>,
}

trait Registry<F: Real> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, NumError>;
    fn vector(&mut self, name: &str, len: usize) -> Result<ParamId, NumError>;
    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> Result<GruParams, NumError>;
    fn attn(&mut self, prefix: &str, query: usize, key: usize, attn: usize) -> Result<AttnParams, NumError>;
}

struct Init<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Real> Registry<F> for Init<'_, F> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, NumError> {
        self.store.add(name, init_uniform(vec![rows, cols], INIT_RANGE, &mut self.rng))
    }
    fn vector(&mut self, name: &str, len: usize) -> Result<ParamId, NumError> {
        self.store.add(name, init_uniform(vec![len], INIT_RANGE, &mut self.rng))
    }
    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> Result<GruParams, NumError> {
        GruParams::register(self.store, prefix, input, hidden, &mut self.rng)
    }
    fn attn(&mut self, prefix: &str, query: usize, key: usize, attn: usize) -> Result<AttnParams, NumError> {
        AttnParams::register(self.store, prefix, query, key, attn, &mut self.rng)
    }
}

struct Lookup<'a, F: Real> {
    store: &'a ParamStore<F>,
}

impl<F: Real> Lookup<'_, F> {
    fn shaped(&self, name: &str, shape: &[usize]) -> Result<ParamId, NumError> {
        let id = self.store.id(name)?;
        if self.store.get(id).shape() != shape {
            return Err(NumError::Shape { op: "parameter lookup", expected: format!("{name}: {shape:?}"), got: format!("{:?}", self.store.get(id).shape()) });
        }
        Ok(id)
    }
}

impl<F: Real> Registry<F> for Lookup<'_, F> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, NumError> {
        self.shaped(name, &[rows, cols])
    }
    fn vector(&mut self, name: &str, len: usize) -> Result<ParamId, NumError> {
        self.shaped(name, &[len])
    }
    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> Result<GruParams, NumError> {
        GruParams::lookup(self.store, prefix, input, hidden)
    }
    fn attn(&mut self, prefix: &str, query: usize, key: usize, attn: usize) -> Result<AttnParams, NumError> {
        AttnParams::lookup(self.store, prefix, query, key, attn)
    }
}

fn classifier<F: Real>(reg: &mut impl Registry<F>, prefix: &str, input: usize, h: usize, a: usize) -> Result<ClassifierParams, NumError> {
    Ok(ClassifierParams {
        gru: reg.gru(&format!("{prefix}.gru"), input, h)?,
        attn: reg.attn(&format!("{prefix}.attn"), h, h, a)?,
        out: reg.vector(&format!("{prefix}.out"), h)?,
    })
}

/// Declares every tensor, in checkpoint order.
fn declare<F: Real>(reg: &mut impl Registry<F>, c: &ModelConfig, vocab_size: usize) -> Result<ModelParams, NumError> {
    let (e, h, a, d) = (c.embed_dim, c.hidden_dim, c.attn_dim, MATCH_BINS);
    Ok(ModelParams {
        embedding: reg.matrix("embedding", vocab_size, e)?,
        encoder: reg.gru("encoder", e, h)?,
        inf_gru: reg.gru("informable.gru", h + e, h)?,
        inf_attn: reg.attn("informable.attn", h, h, a)?,
        inf_gen: reg.matrix("informable.generate", vocab_size, h)?,
        inf_copy: reg.matrix("informable.copy", h, h)?,
        req: classifier(reg, "requestable", h + e, h, a)?,
        resp_slot: classifier(reg, "response_slot", h + e + d, h, a)?,
        resp_gru: reg.gru("response.gru", h + h + e + d, h)?,
        resp_attn_enc: reg.attn("response.attn_input", h, h, a)?,
        resp_attn_belief: reg.attn("response.attn_belief", h, h, a)?,
        resp_gen: reg.matrix("response.generate", vocab_size, h)?,
        resp_copy: reg.matrix("response.copy", h, h)?,
    })
}

fn structural_ids(schema: &SlotSchema, vocab: &Vocab) -> Result<SlotIds, ModelError> {
    let get = |t: String| vocab.get(&t).ok_or_else(|| ModelError::Mismatch(format!("vocabulary lacks schema token `{t}`")));
    Ok(SlotIds {
        go: schema.informable_slots.iter().map(|s| get(start_symbol(s))).collect::<Result<_, _>>()?,
        end: schema.informable_slots.iter().map(|s| get(end_marker(s))).collect::<Result<_, _>>()?,
        req: schema.requestable_slots.iter().map(|s| get(s.clone())).collect::<Result<_, _>>()?,
        placeholder: schema.response_slots.iter().map(|s| get(s.clone())).collect::<Result<_, _>>()?,
    })
}

fn output_masks(schema: &SlotSchema, vocab: &Vocab, ids: &SlotIds) -> (Vec<Arc<[bool]>>, Arc<[bool]>) {
    let v = vocab.len();
    let mut base = vec![true; v];
    for id in [PAD_ID, GO_ID].into_iter().chain(ids.go.iter().copied()).chain(ids.end.iter().copied()) {
        base[id] = false;
    }
    if let Some(id) = vocab.get(crate::corpus::END_BELIEF) {
        base[id] = false;
    }
    let resp: Arc<[bool]> = base.clone().into();
    let mut inf_base = base;
    inf_base[UNK_ID] = false;
    inf_base[EOS_ID] = false;
    for &p in &ids.placeholder {
        inf_base[p] = false;
    }
    let inf = (0..schema.informable_slots.len())
        .map(|k| {
            let mut m = inf_base.clone();
            m[ids.end[k]] = true;
            m.into()
        })
        .collect();
    (inf, resp)
}

impl<F: Real> Fsdm<F> {
    /// Fresh weights: uniform in ±[`INIT_RANGE`], zero GRU biases.
    pub fn new(config: ModelConfig, schema: SlotSchema, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        let ids = declare(&mut Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) }, &config, vocab.len())?;
        Self::assemble(config, schema, vocab, params, ids)
    }

    /// Wraps existing weights, checking every tensor's name and shape.
    pub fn from_parts(config: ModelConfig, schema: SlotSchema, vocab: Vocab, params: ParamStore<F>) -> Result<Self, ModelError> {
        let ids = declare(&mut Lookup { store: &params }, &config, vocab.len()).map_err(|e| ModelError::Mismatch(e.to_string()))?;
        let expected = params.ids().count();
        let used = {
            let mut probe = ParamStore::<F>::new();
            declare(&mut Init { store: &mut probe, rng: ChaCha8Rng::seed_from_u64(0) }, &config, vocab.len())?;
            probe.len()
        };
        if expected != used {
            return Err(ModelError::Mismatch(format!("checkpoint has {expected} tensors, model declares {used}")));
        }
        Self::assemble(config, schema, vocab, params, ids)
    }

    fn assemble(config: ModelConfig, schema: SlotSchema, vocab: Vocab, params: ParamStore<F>, ids: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        schema.validate()?;
        let slot_ids = structural_ids(&schema, &vocab)?;
        let (inf_allowed, resp_allowed) = output_masks(&schema, &vocab, &slot_ids);
        Ok(Self { config, schema, vocab, params, ids, slot_ids, inf_allowed, resp_allowed })
    }

    /// Same model in another precision.
    pub fn cast<G: Real>(&self) -> Fsdm<G> {
        Fsdm {
            config: self.config,
            schema: self.schema.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            slot_ids: self.slot_ids.clone(),
            inf_allowed: self.inf_allowed.clone(),
            resp_allowed: self.resp_allowed.clone(),
        }
    }

    pub fn embedding(&self) -> ParamId {
        self.ids.embedding
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Checkpoint metadata describing this model; `extra` is stored under `"extra"`.
    pub fn checkpoint_meta(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "model": self.config,
            "schema": self.schema,
            "vocab": self.vocab,
            "extra": extra,
        })
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
        save_checkpoint(dir, &self.params, self.checkpoint_meta(extra))?;
        Ok(())
    }

    /// Loads a model and the `extra` metadata saved with it.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value), ModelError> {
        let ckpt = load_checkpoint::<F>(dir)?;
        let field = |name: &str| ckpt.meta.get(name).cloned().ok_or_else(|| ModelError::Mismatch(format!("manifest meta lacks `{name}`")));
        let bad = |e: serde_json::Error| ModelError::Mismatch(e.to_string());
        let config: ModelConfig = serde_json::from_value(field("model")?).map_err(bad)?;
        let schema: SlotSchema = serde_json::from_value(field("schema")?).map_err(bad)?;
        let vocab: Vocab = serde_json::from_value(field("vocab")?).map_err(bad)?;
        let extra = ckpt.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((Self::from_parts(config, schema, vocab, ckpt.params)?, extra))
    }
}
