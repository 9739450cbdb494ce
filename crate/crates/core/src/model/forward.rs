use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Fsdm, ModelError};
use crate::corpus::{serialize_belief, BeliefState, TurnExample, EOS_ID, GO_ID, UNK_ID};
use crate::kb::{encode_match_count, MatchIndicator};
use crate::numcore::{attention, copy_combine, gru_cell, AttnKeys, Real, Tape, Var};

/// Dropout state for one forward pass; a no-op outside training.
pub struct Dropout {
    rate: f64,
    training: bool,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn train(rate: f64, seed: u64) -> Self {
        Self { rate, training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn eval() -> Self {
        Self { rate: 0.0, training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn apply<F: Real>(&mut self, tape: &mut Tape<'_, F>, v: Var) -> Result<Var, ModelError> {
        if !self.training || self.rate == 0.0 {
            return Ok(v);
        }
        Ok(tape.dropout(v, F::of(self.rate), true, &mut self.rng)?)
    }
}

/// Mean step loss, step hiddens and step distributions of a teacher-forced decode.
pub(crate) type TeacherForced<F> = (Var, Vec<Var>, Vec<Vec<F>>);

/// Encoder output for one turn plus the per-turn extended vocabulary.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Surface tokens of previous response ∘ previous belief ∘ user utterance.
    pub tokens: Vec<String>,
    pub hiddens: Vec<Var>,
    pub last: Var,
    /// Source tokens missing from the vocabulary get ids `V`, `V + 1`, ...
    pub oov: Vec<String>,
    /// Extended id of each source position.
    pub align: Vec<usize>,
    pub(crate) inf_keys: AttnKeys,
    pub(crate) req_keys: AttnKeys,
    pub(crate) resp_keys: AttnKeys,
    /// `tanh(W_c h_i)` for every source position.
    pub(crate) inf_copy_rows: Var,
}

/// Loss terms of one turn, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub inf: Var,
    pub req: Var,
    pub resp_slot: Var,
    pub resp: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub inf: f64,
    pub req: f64,
    pub resp_slot: f64,
    pub resp: f64,
}

impl LossWeights {
    pub fn camrest() -> Self {
        Self { inf: 1.5, req: 9.0, resp_slot: 8.0, resp: 0.5 }
    }

    pub fn kvret() -> Self {
        Self { inf: 1.0, req: 3.0, resp_slot: 2.0, resp: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub inf: f64,
    pub req: f64,
    pub resp_slot: f64,
    pub resp: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn from_tape<F: Real>(tape: &Tape<'_, F>, v: &LossVars) -> Self {
        let s = |x: Var| tape.scalar(x).f64();
        Self { inf: s(v.inf), req: s(v.req), resp_slot: s(v.resp_slot), resp: s(v.resp), total: s(v.total) }
    }
}

/// Teacher-forced pass over one example.
#[derive(Debug, Clone)]
pub struct TurnForward<F> {
    pub losses: LossVars,
    /// Per informable slot, the output distribution at each step (when collected).
    pub inf_dists: Vec<Vec<Vec<F>>>,
    pub resp_dists: Vec<Vec<F>>,
    pub req_probs: Vec<F>,
    pub resp_slot_probs: Vec<F>,
}

/// Hidden states the response side attends to and copies from.
pub(crate) struct BeliefHiddens {
    /// Per informable slot, one hidden per decoder step (value tokens, then end marker if emitted).
    pub inf: Vec<Vec<Var>>,
    pub req: Vec<(Var, Var)>,
    pub resp_slot: Vec<(Var, Var)>,
}

/// Copy sources for the response decoder.
pub(crate) struct RespCtx {
    pub belief_keys: AttnKeys,
    pub d: Var,
    pub cand_tokens: Vec<String>,
    pub cand_align: Vec<usize>,
    pub cand_rows: Option<Var>,
    pub gates: Option<Var>,
    pub copy_allowed: Arc<[bool]>,
}

pub(crate) fn masked<F: Real>(scores: &[F], allowed: &[bool]) -> Vec<F> {
    scores.iter().zip(allowed).map(|(&s, &a)| if a { s } else { F::neg_infinity() }).collect()
}

impl<F: Real> Fsdm<F> {
    pub(crate) fn embed(&self, tape: &mut Tape<'_, F>, id: usize, drop: &mut Dropout) -> Result<Var, ModelError> {
        let e = tape.row(self.ids.embedding, id)?;
        drop.apply(tape, e)
    }

    /// Embedding row for an extended id (source-only tokens read `<unk>`).
    pub(crate) fn input_id(&self, ext: usize) -> usize {
        if ext < self.vocab.len() {
            ext
        } else {
            UNK_ID
        }
    }

    pub fn surface(&self, enc: &Encoded, ext: usize) -> String {
        match ext.checked_sub(self.vocab.len()) {
            None => self.vocab.token(ext).to_string(),
            Some(i) => enc.oov[i].clone(),
        }
    }

    /// Extended id of `token`, registering it as a source-only token if needed.
    pub(crate) fn ext_id(&self, enc: &mut Encoded, token: &str) -> usize {
        if let Some(id) = self.vocab.get(token) {
            return id;
        }
        match enc.oov.iter().position(|t| t == token) {
            Some(i) => self.vocab.len() + i,
            None => {
                enc.oov.push(token.to_string());
                self.vocab.len() + enc.oov.len() - 1
            }
        }
    }

    /// Runs the encoder GRU over previous response ∘ serialized previous belief ∘ user utterance.
    pub fn encode(
        &self,
        tape: &mut Tape<'_, F>,
        prev_response: &[String],
        prev_belief: &BeliefState,
        user: &[String],
        drop: &mut Dropout,
    ) -> Result<Encoded, ModelError> {
        let mut tokens: Vec<String> = prev_response.to_vec();
        tokens.extend(serialize_belief(prev_belief, &self.schema));
        tokens.extend(user.iter().cloned());
        self.encode_tokens(tape, tokens, drop)
    }

    pub fn encode_tokens(&self, tape: &mut Tape<'_, F>, tokens: Vec<String>, drop: &mut Dropout) -> Result<Encoded, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mut h = tape.zeros(self.config.hidden_dim);
        let mut hiddens = Vec::with_capacity(tokens.len());
        let mut outputs = Vec::with_capacity(tokens.len());
        for t in &tokens {
            let x = self.embed(tape, self.vocab.id(t), drop)?;
            h = gru_cell(tape, x, h, &self.ids.encoder)?;
            hiddens.push(h);
            outputs.push(drop.apply(tape, h)?);
        }
        let memory = tape.stack_rows(&outputs)?;
        let inf_keys = self.ids.inf_attn.project_rows(tape, memory)?;
        let req_keys = self.ids.req.attn.project_rows(tape, memory)?;
        let resp_keys = self.ids.resp_attn_enc.project_rows(tape, memory)?;
        let wc = tape.param(self.ids.inf_copy);
        let proj = tape.matmul_nt(memory, wc)?;
        let inf_copy_rows = tape.tanh(proj);
        let mut enc = Encoded {
            last: h,
            hiddens,
            oov: Vec::new(),
            align: Vec::with_capacity(tokens.len()),
            tokens: Vec::new(),
            inf_keys,
            req_keys,
            resp_keys,
            inf_copy_rows,
        };
        for t in &tokens {
            let id = self.ext_id(&mut enc, t);
            enc.align.push(id);
        }
        enc.tokens = tokens;
        Ok(enc)
    }

    /// Copy mask over source positions for informable slot `k`.
    pub(crate) fn inf_copy_allowed(&self, enc: &Encoded, k: usize) -> Arc<[bool]> {
        let allowed = &self.inf_allowed[k];
        enc.align.iter().map(|&a| a >= allowed.len() || allowed[a]).collect()
    }

    /// One informable decoder step: returns the new hidden state and the
    /// generation and copy scores.
    pub(crate) fn inf_step(
        &self,
        tape: &mut Tape<'_, F>,
        enc: &Encoded,
        h_prev: Var,
        input: usize,
        drop: &mut Dropout,
    ) -> Result<(Var, Var, Var), ModelError> {
        let (c, _) = attention(tape, h_prev, &enc.inf_keys, &self.ids.inf_attn)?;
        let e = self.embed(tape, input, drop)?;
        let x = tape.concat(&[c, e])?;
        let h = gru_cell(tape, x, h_prev, &self.ids.inf_gru)?;
        let hd = drop.apply(tape, h)?;
        let wg = tape.param(self.ids.inf_gen);
        let gen = tape.linear(wg, hd, None)?;
        let copy = tape.linear(enc.inf_copy_rows, hd, None)?;
        Ok((h, gen, copy))
    }

    /// Requestable classifiers: `(hidden, logit)` per requestable slot.
    pub(crate) fn requestable(&self, tape: &mut Tape<'_, F>, enc: &Encoded, drop: &mut Dropout) -> Result<Vec<(Var, Var)>, ModelError> {
        let p = &self.ids.req;
        let (c, _) = attention(tape, enc.last, &enc.req_keys, &p.attn)?;
        let w = tape.param(p.out);
        let mut out = Vec::with_capacity(self.slot_ids.req.len());
        for &id in &self.slot_ids.req {
            let e = self.embed(tape, id, drop)?;
            let x = tape.concat(&[c, e])?;
            let h = gru_cell(tape, x, enc.last, &p.gru)?;
            let hd = drop.apply(tape, h)?;
            out.push((h, tape.dot(w, hd)?));
        }
        Ok(out)
    }

    /// Response-slot classifiers, each started from its requestable slot's hidden state.
    pub(crate) fn response_slots(
        &self,
        tape: &mut Tape<'_, F>,
        inf_hiddens: &[Vec<Var>],
        req: &[(Var, Var)],
        d: Var,
        drop: &mut Dropout,
    ) -> Result<Vec<(Var, Var)>, ModelError> {
        let p = &self.ids.resp_slot;
        let pool: Vec<Var> = inf_hiddens.iter().flatten().copied().chain(req.iter().map(|&(h, _)| h)).collect();
        if pool.is_empty() {
            return Ok(Vec::new());
        }
        let keys = p.attn.project_keys(tape, &pool)?;
        let w = tape.param(p.out);
        let mut out = Vec::with_capacity(req.len());
        for (&(h_req, _), &id) in req.iter().zip(&self.slot_ids.placeholder) {
            let (c, _) = attention(tape, h_req, &keys, &p.attn)?;
            let e = self.embed(tape, id, drop)?;
            let x = tape.concat(&[c, e, d])?;
            let h = gru_cell(tape, x, h_req, &p.gru)?;
            let hd = drop.apply(tape, h)?;
            out.push((h, tape.dot(w, hd)?));
        }
        Ok(out)
    }

    /// Builds the response decoder's belief memory and copy candidates.
    ///
    /// Candidates: every informable value token (gate 1, its decoder step's
    /// hidden), every requestable slot name (gate = its classifier probability,
    /// or 1 when the name is also an informable value) and every placeholder
    /// (gate = its classifier probability). Candidates whose gate is exactly 0
    /// are disabled.
    pub(crate) fn response_context(
        &self,
        tape: &mut Tape<'_, F>,
        enc: &mut Encoded,
        values: &[Vec<String>],
        hid: &BeliefHiddens,
        d: Var,
    ) -> Result<RespCtx, ModelError> {
        let pool: Vec<Var> = hid
            .inf
            .iter()
            .flatten()
            .copied()
            .chain(hid.req.iter().map(|&(h, _)| h))
            .chain(hid.resp_slot.iter().map(|&(h, _)| h))
            .collect();
        let belief_keys = if pool.is_empty() {
            // an empty schema still needs something to attend to
            let z = tape.zeros(self.config.hidden_dim);
            self.ids.resp_attn_belief.project_keys(tape, &[z])?
        } else {
            self.ids.resp_attn_belief.project_keys(tape, &pool)?
        };

        let in_values: BTreeSet<&str> = values.iter().flatten().map(String::as_str).collect();
        let mut cand_tokens = Vec::new();
        let mut cand_hiddens = Vec::new();
        let mut gates = Vec::new();
        let one = tape.vector(vec![F::one()]);
        for (k, tokens) in values.iter().enumerate() {
            for (j, t) in tokens.iter().enumerate() {
                cand_tokens.push(t.clone());
                cand_hiddens.push(hid.inf[k][j]);
                gates.push(one);
            }
        }
        for (slot, &(h, logit)) in self.schema.requestable_slots.iter().zip(&hid.req) {
            cand_tokens.push(slot.clone());
            cand_hiddens.push(h);
            gates.push(if in_values.contains(slot.as_str()) { one } else { tape.sigmoid(logit) });
        }
        for (ph, &(h, logit)) in self.schema.response_slots.iter().zip(&hid.resp_slot) {
            cand_tokens.push(ph.clone());
            cand_hiddens.push(h);
            gates.push(tape.sigmoid(logit));
        }
        let cand_align = cand_tokens.iter().map(|t| self.ext_id(enc, t)).collect();
        let (cand_rows, gate_var) = if cand_hiddens.is_empty() {
            (None, None)
        } else {
            let rows = tape.stack_rows(&cand_hiddens)?;
            let wc = tape.param(self.ids.resp_copy);
            let proj = tape.matmul_nt(rows, wc)?;
            (Some(tape.tanh(proj)), Some(tape.concat(&gates)?))
        };
        let copy_allowed = match gate_var {
            Some(g) => tape.value(g).iter().map(|&x| x != F::zero()).collect(),
            None => Arc::from(Vec::new()),
        };
        Ok(RespCtx { belief_keys, d, cand_tokens, cand_align, cand_rows, gates: gate_var, copy_allowed })
    }

    pub(crate) fn resp_step(
        &self,
        tape: &mut Tape<'_, F>,
        enc: &Encoded,
        rc: &RespCtx,
        h_prev: Var,
        input: usize,
        drop: &mut Dropout,
    ) -> Result<(Var, Var, Option<Var>), ModelError> {
        let (ce, _) = attention(tape, h_prev, &enc.resp_keys, &self.ids.resp_attn_enc)?;
        let (cb, _) = attention(tape, h_prev, &rc.belief_keys, &self.ids.resp_attn_belief)?;
        let e = self.embed(tape, input, drop)?;
        let x = tape.concat(&[ce, cb, e, rc.d])?;
        let h = gru_cell(tape, x, h_prev, &self.ids.resp_gru)?;
        let hd = drop.apply(tape, h)?;
        let wg = tape.param(self.ids.resp_gen);
        let gen = tape.linear(wg, hd, None)?;
        let copy = match (rc.cand_rows, rc.gates) {
            (Some(rows), Some(g)) => {
                let raw = tape.linear(rows, hd, None)?;
                Some(tape.mul(raw, g)?)
            }
            _ => None,
        };
        Ok((h, gen, copy))
    }

    pub(crate) fn indicator_var(&self, tape: &mut Tape<'_, F>, d: MatchIndicator) -> Var {
        tape.vector(d.bins().iter().map(|&x| F::of(x)).collect())
    }

    /// Joint distribution over extended ids for one decoder step.
    pub(crate) fn step_distribution(
        &self,
        tape: &Tape<'_, F>,
        gen: Var,
        copy: Option<Var>,
        gen_allowed: &[bool],
        copy_allowed: &[bool],
        align: &[usize],
    ) -> Result<Vec<F>, ModelError> {
        let g = masked(tape.value(gen), gen_allowed);
        let c = copy.map(|c| masked(tape.value(c), copy_allowed)).unwrap_or_default();
        let align = if copy.is_some() { align } else { &[] };
        Ok(copy_combine(&g, &c, align)?)
    }

    /// Teacher-forced informable decoder for slot `k`: gold value tokens then
    /// the slot's end marker. Returns the mean step loss, the step hiddens and
    /// (when `collect`) the step distributions.
    pub(crate) fn inf_teacher_forced(
        &self,
        tape: &mut Tape<'_, F>,
        enc: &Encoded,
        k: usize,
        gold: &[String],
        drop: &mut Dropout,
        collect: bool,
    ) -> Result<TeacherForced<F>, ModelError> {
        let copy_allowed = self.inf_copy_allowed(enc, k);
        let mut h = enc.last;
        let mut input = self.slot_ids.go[k];
        let mut step_losses = Vec::with_capacity(gold.len() + 1);
        let mut hiddens = Vec::with_capacity(gold.len() + 1);
        let mut dists = Vec::new();
        let end = self.vocab.token(self.slot_ids.end[k]).to_string();
        for target in gold.iter().chain(std::iter::once(&end)) {
            let (hn, gen, copy) = self.inf_step(tape, enc, h, input, drop)?;
            if collect {
                dists.push(self.step_distribution(tape, gen, Some(copy), &self.inf_allowed[k], &copy_allowed, &enc.align)?);
            }
            let tg = self.vocab.get(target).filter(|&i| self.inf_allowed[k][i]);
            let tc: Vec<usize> = (0..enc.tokens.len()).filter(|&i| copy_allowed[i] && enc.tokens[i] == *target).collect();
            step_losses.push(tape.copy_nll(gen, Some(copy), Some(self.inf_allowed[k].clone()), Some(copy_allowed.clone()), tg, tc)?);
            hiddens.push(hn);
            h = hn;
            input = self.vocab.id(target);
        }
        Ok((tape.mean(&step_losses)?, hiddens, dists))
    }

    /// Teacher-forced forward pass and the four losses.
    pub fn forward_example(
        &self,
        tape: &mut Tape<'_, F>,
        ex: &TurnExample,
        weights: &LossWeights,
        drop: &mut Dropout,
        collect: bool,
    ) -> Result<TurnForward<F>, ModelError> {
        let mut enc = self.encode(tape, &ex.prev_response, &ex.prev_belief, &ex.user_utterance, drop)?;

        // informable values: each slot decodes its gold tokens then its end marker
        let mut inf_losses = Vec::with_capacity(self.schema.informable_slots.len());
        let mut inf_hiddens = Vec::with_capacity(inf_losses.capacity());
        let mut inf_dists = Vec::new();
        let mut values = Vec::with_capacity(inf_losses.capacity());
        for (k, slot) in self.schema.informable_slots.iter().enumerate() {
            let gold = ex.gold_belief.value(slot).to_vec();
            let (loss, hiddens, dists) = self.inf_teacher_forced(tape, &enc, k, &gold, drop, collect)?;
            inf_losses.push(loss);
            inf_hiddens.push(hiddens);
            inf_dists.push(dists);
            values.push(gold);
        }
        let l_inf = if inf_losses.is_empty() { tape.vector(vec![F::zero()]) } else { tape.mean(&inf_losses)? };

        let req = self.requestable(tape, &enc, drop)?;
        let req_terms: Vec<Var> = self
            .schema
            .requestable_slots
            .iter()
            .zip(&req)
            .map(|(slot, &(_, logit))| {
                let z = if ex.gold_belief.requestable().contains(slot) { F::one() } else { F::zero() };
                tape.bce_with_logit(logit, z)
            })
            .collect::<Result<_, _>>()?;
        let l_req = if req_terms.is_empty() { tape.vector(vec![F::zero()]) } else { tape.mean(&req_terms)? };

        let d = self.indicator_var(tape, encode_match_count(ex.gold_match_count));
        let rs = self.response_slots(tape, &inf_hiddens, &req, d, drop)?;
        let rs_terms: Vec<Var> = self
            .schema
            .response_slots
            .iter()
            .zip(&rs)
            .map(|(ph, &(_, logit))| {
                let z = if ex.gold_response_slots.contains(ph) { F::one() } else { F::zero() };
                tape.bce_with_logit(logit, z)
            })
            .collect::<Result<_, _>>()?;
        let l_rs = if rs_terms.is_empty() { tape.vector(vec![F::zero()]) } else { tape.mean(&rs_terms)? };

        let hid = BeliefHiddens { inf: inf_hiddens, req: req.clone(), resp_slot: rs.clone() };
        let rc = self.response_context(tape, &mut enc, &values, &hid, d)?;
        let mut h = enc.last;
        let mut input = GO_ID;
        let mut resp_losses = Vec::with_capacity(ex.gold_response.len() + 1);
        let mut resp_dists = Vec::new();
        let eos = self.vocab.token(EOS_ID).to_string();
        for target in ex.gold_response.iter().chain(std::iter::once(&eos)) {
            let (hn, gen, copy) = self.resp_step(tape, &enc, &rc, h, input, drop)?;
            if collect {
                resp_dists.push(self.step_distribution(tape, gen, copy, &self.resp_allowed, &rc.copy_allowed, &rc.cand_align)?);
            }
            let tc: Vec<usize> =
                (0..rc.cand_tokens.len()).filter(|&i| rc.copy_allowed[i] && rc.cand_tokens[i] == *target).collect();
            let tg = match self.vocab.get(target).filter(|&i| self.resp_allowed[i]) {
                Some(i) => Some(i),
                None if tc.is_empty() => Some(UNK_ID),
                None => None,
            };
            resp_losses.push(tape.copy_nll(gen, copy, Some(self.resp_allowed.clone()), copy.map(|_| rc.copy_allowed.clone()), tg, tc)?);
            h = hn;
            input = self.vocab.id(target);
        }
        let l_resp = tape.mean(&resp_losses)?;

        let total = tape.affine(&[
            (l_inf, F::of(weights.inf)),
            (l_req, F::of(weights.req)),
            (l_rs, F::of(weights.resp_slot)),
            (l_resp, F::of(weights.resp)),
        ])?;
        let sig = |tape: &Tape<'_, F>, pairs: &[(Var, Var)]| pairs.iter().map(|&(_, l)| crate::numcore::sigmoid(tape.scalar(l))).collect();
        Ok(TurnForward {
            losses: LossVars { inf: l_inf, req: l_req, resp_slot: l_rs, resp: l_resp, total },
            inf_dists,
            resp_dists,
            req_probs: sig(tape, &req),
            resp_slot_probs: sig(tape, &rs),
        })
    }
}
