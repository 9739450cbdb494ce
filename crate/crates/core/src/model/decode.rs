use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::forward::{BeliefHiddens, Dropout, Encoded};
use super::{Fsdm, ModelError};
use crate::corpus::{BeliefState, SlotSchema, EOS_ID, GO_ID};
use crate::kb::{encode_match_count, Kb, MatchIndicator, Record};
use crate::numcore::{sigmoid, Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// 1 decodes greedily.
    pub beam_width: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { beam_width: 1 }
    }
}

/// Everything the model produces for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub belief: BeliefState,
    pub match_count: usize,
    pub indicator: MatchIndicator,
    pub kb_results: Vec<Record>,
    /// Delexicalized response tokens.
    pub response: Vec<String>,
    pub requestable_probs: BTreeMap<String, f64>,
    pub response_slot_probs: BTreeMap<String, f64>,
    pub response_slots: BTreeSet<String>,
    /// Copy gate of every word the response decoder may copy.
    pub copy_probs: BTreeMap<String, f64>,
}

/// Copy gate per word: informable value words always 1, requestable slot
/// names and placeholders their classifier probability.
pub fn word_copy_probability(
    belief: &BeliefState,
    requestable_probs: &BTreeMap<String, f64>,
    response_slot_probs: &BTreeMap<String, f64>,
    schema: &SlotSchema,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for slot in &schema.requestable_slots {
        out.insert(slot.clone(), requestable_probs.get(slot).copied().unwrap_or(0.0));
    }
    for ph in &schema.response_slots {
        out.insert(ph.clone(), response_slot_probs.get(ph).copied().unwrap_or(0.0));
    }
    for slot in &schema.informable_slots {
        for w in belief.value(slot) {
            out.insert(w.clone(), 1.0);
        }
    }
    out
}

struct Hyp<S> {
    ids: Vec<usize>,
    states: Vec<S>,
    score: f64,
    done: bool,
}

fn better<S>(a: &Hyp<S>, b: &Hyp<S>) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search over extended ids; scores are summed log-probabilities and ties
/// go to the lexicographically smallest sequence. Returns emitted ids (the
/// stop id included when reached) and the state after each.
pub(crate) fn beam_search<S: Clone, F: Real>(
    width: usize,
    max_len: usize,
    start_state: S,
    start_input: usize,
    stop: usize,
    mut step: impl FnMut(&S, usize) -> Result<(S, Vec<F>), ModelError>,
) -> Result<(Vec<usize>, Vec<S>), ModelError> {
    let width = width.max(1);
    let mut beams = vec![Hyp { ids: Vec::new(), states: Vec::new(), score: 0.0, done: false }];
    for _ in 0..max_len {
        if beams.iter().all(|h| h.done) {
            break;
        }
        let mut next = Vec::new();
        for hyp in beams {
            if hyp.done {
                next.push(hyp);
                continue;
            }
            let state = hyp.states.last().unwrap_or(&start_state);
            let input = hyp.ids.last().copied().unwrap_or(start_input);
            let (new_state, dist) = step(state, input)?;
            let mut ranked: Vec<(usize, f64)> =
                dist.iter().enumerate().map(|(i, p)| (i, p.f64())).filter(|&(_, p)| p > 0.0).collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            for &(id, p) in ranked.iter().take(width) {
                let mut ids = hyp.ids.clone();
                ids.push(id);
                let mut states = hyp.states.clone();
                states.push(new_state.clone());
                next.push(Hyp { ids, states, score: hyp.score + p.ln(), done: id == stop });
            }
        }
        next.sort_by(better);
        next.truncate(width);
        if next.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        beams = next;
    }
    let best = beams.into_iter().min_by(better).expect("non-empty beam");
    Ok((best.ids, best.states))
}

impl<F: Real> Fsdm<F> {
    /// Decodes one turn: belief, KB query, slot classifiers and response.
    pub fn predict_turn(
        &self,
        prev_response: &[String],
        prev_belief: &BeliefState,
        user: &[String],
        kb: &Kb,
        opts: &DecodeOptions,
    ) -> Result<TurnPrediction, ModelError> {
        let mut tape = Tape::new(&self.params);
        let mut drop = Dropout::eval();
        let mut enc = self.encode(&mut tape, prev_response, prev_belief, user, &mut drop)?;

        let mut belief = BeliefState::new();
        let mut values = Vec::with_capacity(self.schema.informable_slots.len());
        let mut inf_hiddens = Vec::with_capacity(values.capacity());
        for (k, slot) in self.schema.informable_slots.iter().enumerate() {
            let (ids, states) = self.decode_value(&mut tape, &enc, k, opts.beam_width)?;
            let end = self.slot_ids.end[k];
            let words: Vec<String> = ids.iter().filter(|&&i| i != end).map(|&i| self.surface(&enc, i)).collect();
            belief.set_value(slot.clone(), words.clone());
            values.push(words);
            inf_hiddens.push(states);
        }

        let req = self.requestable(&mut tape, &enc, &mut drop)?;
        let mut requestable_probs = BTreeMap::new();
        for (slot, &(_, logit)) in self.schema.requestable_slots.iter().zip(&req) {
            let p = sigmoid(tape.scalar(logit)).f64();
            requestable_probs.insert(slot.clone(), p);
            if p >= self.config.threshold {
                belief.request(slot.clone());
            }
        }

        let kb_results: Vec<Record> = kb.query_belief(&belief).into_iter().cloned().collect();
        let indicator = encode_match_count(kb_results.len());
        let d = self.indicator_var(&mut tape, indicator);

        let rs = self.response_slots(&mut tape, &inf_hiddens, &req, d, &mut drop)?;
        let mut response_slot_probs = BTreeMap::new();
        let mut response_slots = BTreeSet::new();
        for (ph, &(_, logit)) in self.schema.response_slots.iter().zip(&rs) {
            let p = sigmoid(tape.scalar(logit)).f64();
            response_slot_probs.insert(ph.clone(), p);
            if p >= self.config.threshold {
                response_slots.insert(ph.clone());
            }
        }

        // the value hiddens feeding the response side are the ones that emitted a value word
        let hid = BeliefHiddens { inf: inf_hiddens, req, resp_slot: rs };
        let rc = self.response_context(&mut tape, &mut enc, &values, &hid, d)?;
        let (ids, _) = beam_search(
            opts.beam_width,
            self.config.max_response_len,
            enc.last,
            GO_ID,
            EOS_ID,
            |&h: &Var, input| {
                let (hn, gen, copy) = self.resp_step(&mut tape, &enc, &rc, h, self.input_id(input), &mut drop)?;
                let dist = self.step_distribution(&tape, gen, copy, &self.resp_allowed, &rc.copy_allowed, &rc.cand_align)?;
                Ok((hn, dist))
            },
        )?;
        let response = ids.iter().filter(|&&i| i != EOS_ID).map(|&i| self.surface(&enc, i)).collect();

        Ok(TurnPrediction {
            copy_probs: word_copy_probability(&belief, &requestable_probs, &response_slot_probs, &self.schema),
            belief,
            match_count: kb_results.len(),
            indicator,
            kb_results,
            response,
            requestable_probs,
            response_slot_probs,
            response_slots,
        })
    }

    fn decode_value(&self, tape: &mut Tape<'_, F>, enc: &Encoded, k: usize, width: usize) -> Result<(Vec<usize>, Vec<Var>), ModelError> {
        let copy_allowed = self.inf_copy_allowed(enc, k);
        let mut drop = Dropout::eval();
        beam_search(width, self.config.max_value_len + 1, enc.last, self.slot_ids.go[k], self.slot_ids.end[k], |&h: &Var, input| {
            let (hn, gen, copy) = self.inf_step(tape, enc, h, self.input_id(input), &mut drop)?;
            let dist = self.step_distribution(tape, gen, Some(copy), &self.inf_allowed[k], &copy_allowed, &enc.align)?;
            Ok((hn, dist))
        })
        .map(|(mut ids, mut states)| {
            // a value longer than the limit is cut without its end marker
            if ids.len() > self.config.max_value_len && ids.last() != Some(&self.slot_ids.end[k]) {
                ids.truncate(self.config.max_value_len);
                states.truncate(self.config.max_value_len);
            }
            (ids, states)
        })
    }
}
