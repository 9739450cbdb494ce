//! Turn-level slot precision/recall/F1, corpus BLEU-4, entity match rate and
//! dialogue-level success F1.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{BeliefState, SlotSchema};
use crate::kb::Kb;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add_sets<T: Ord>(&mut self, predicted: &BTreeSet<T>, gold: &BTreeSet<T>) {
        let tp = predicted.intersection(gold).count();
        self.tp += tp;
        self.fp += predicted.len() - tp;
        self.fn_ += gold.len() - tp;
    }

    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision, recall and F1 over aligned per-turn item sets.
/// An empty denominator scores 0.
pub fn slot_prf<T: Ord>(predicted: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Prf {
    assert_eq!(predicted.len(), gold.len(), "slot_prf needs aligned turn lists");
    let mut c = Counts::default();
    for (p, g) in predicted.iter().zip(gold) {
        c.add_sets(p, g);
    }
    c.prf()
}

/// `(slot, value)` pairs with the value's tokens joined by single spaces.
pub fn informable_items(belief: &BeliefState) -> BTreeSet<(String, String)> {
    belief.informable().iter().map(|(s, v)| (s.clone(), v.join(" ").to_lowercase())).collect()
}

pub fn requestable_items(belief: &BeliefState) -> BTreeSet<String> {
    belief.requestable().clone()
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    out
}

/// Corpus-level BLEU-4 with uniform weights, clipped n-gram counts and the
/// standard brevity penalty. Any n-gram order without a match gives 0.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "bleu needs one reference per candidate");
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, k) in ngrams(c, n) {
                matched[n - 1] += k.min(rc.get(&g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if matched.contains(&0) || c_len == 0 {
        return 0.0;
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * log_p.exp()
}

/// Whether the generated final constraints retrieve exactly the records the
/// gold constraints retrieve; `None` when the gold belief has no informable value.
pub fn entity_match(generated: &BeliefState, gold: &BeliefState, kb: &Kb) -> Option<bool> {
    if gold.informable().is_empty() {
        return None;
    }
    let set = |b: &BeliefState| kb.query_belief(b).into_iter().collect::<BTreeSet<_>>();
    Some(set(generated) == set(gold))
}

/// Mean of [`entity_match`] over `(generated, gold)` final beliefs; `None` if no dialogue is scored.
pub fn entity_match_rate(finals: &[(BeliefState, BeliefState)], kb: &Kb) -> Option<f64> {
    let scored: Vec<bool> = finals.iter().filter_map(|(g, r)| entity_match(g, r, kb)).collect();
    (!scored.is_empty()).then(|| scored.iter().filter(|&&x| x).count() as f64 / scored.len() as f64)
}

/// Placeholders of `schema` in any of `responses`.
pub fn placeholders<S: AsRef<str>>(responses: &[Vec<S>], schema: &SlotSchema) -> BTreeSet<String> {
    responses.iter().flatten().map(AsRef::as_ref).filter(|t| schema.is_response_slot(t)).map(str::to_string).collect()
}

/// Generated and gold responses of one dialogue.
pub type ResponsePair<S> = (Vec<Vec<S>>, Vec<Vec<S>>);

/// Dialogue-level placeholder F1, micro-averaged over dialogues.
/// Each entry is `(generated responses, gold responses)` of one dialogue.
pub fn success_f1<S: AsRef<str>>(dialogues: &[ResponsePair<S>], schema: &SlotSchema) -> f64 {
    let mut c = Counts::default();
    for (g, r) in dialogues {
        c.add_sets(&placeholders(g, schema), &placeholders(r, schema));
    }
    c.prf().f1
}

/// Gold and predicted outputs of one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub user: String,
    pub gold_belief: BeliefState,
    pub pred_belief: BeliefState,
    pub gold_response: Vec<String>,
    pub pred_response: Vec<String>,
    pub match_count: usize,
    /// Predicted response with placeholders filled from the KB.
    pub lexicalized: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueOutcome {
    pub id: String,
    pub turns: Vec<TurnOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueScore {
    pub id: String,
    pub entity_match: Option<bool>,
    pub success: Counts,
    pub turns: Vec<TurnOutcome>,
}

/// Evaluation report; every metric is `null` for an empty split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inf: Option<Prf>,
    pub req: Option<Prf>,
    pub bleu: Option<f64>,
    pub emr: Option<f64>,
    pub succ_f1: Option<f64>,
    pub per_dialogue: Vec<DialogueScore>,
}

impl EvalReport {
    /// Model-selection score: success F1 plus BLEU.
    pub fn selection_score(&self) -> f64 {
        self.succ_f1.unwrap_or(0.0) + self.bleu.unwrap_or(0.0)
    }
}

pub fn evaluate(dialogues: &[DialogueOutcome], kb: &Kb, schema: &SlotSchema) -> EvalReport {
    let turns: Vec<&TurnOutcome> = dialogues.iter().flat_map(|d| &d.turns).collect();
    if turns.is_empty() {
        return EvalReport { inf: None, req: None, bleu: None, emr: None, succ_f1: None, per_dialogue: Vec::new() };
    }
    let items = |f: fn(&BeliefState) -> BTreeSet<(String, String)>, pred: bool| -> Vec<_> {
        turns.iter().map(|t| f(if pred { &t.pred_belief } else { &t.gold_belief })).collect()
    };
    let inf = slot_prf(&items(informable_items, true), &items(informable_items, false));
    let req_p: Vec<_> = turns.iter().map(|t| requestable_items(&t.pred_belief)).collect();
    let req_g: Vec<_> = turns.iter().map(|t| requestable_items(&t.gold_belief)).collect();
    let req = slot_prf(&req_p, &req_g);
    let cands: Vec<Vec<String>> = turns.iter().map(|t| t.pred_response.clone()).collect();
    let refs: Vec<Vec<String>> = turns.iter().map(|t| t.gold_response.clone()).collect();

    let mut success = Counts::default();
    let mut finals = Vec::new();
    let mut per_dialogue = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let gen: Vec<Vec<String>> = d.turns.iter().map(|t| t.pred_response.clone()).collect();
        let gold: Vec<Vec<String>> = d.turns.iter().map(|t| t.gold_response.clone()).collect();
        let mut c = Counts::default();
        c.add_sets(&placeholders(&gen, schema), &placeholders(&gold, schema));
        success.tp += c.tp;
        success.fp += c.fp;
        success.fn_ += c.fn_;
        let entity = d.turns.last().and_then(|t| {
            finals.push((t.pred_belief.clone(), t.gold_belief.clone()));
            entity_match(&t.pred_belief, &t.gold_belief, kb)
        });
        per_dialogue.push(DialogueScore { id: d.id.clone(), entity_match: entity, success: c, turns: d.turns.clone() });
    }
    EvalReport {
        inf: Some(inf),
        req: Some(req),
        bleu: Some(bleu(&cands, &refs)),
        emr: entity_match_rate(&finals, kb),
        succ_f1: Some(success.prf().f1),
        per_dialogue,
    }
}
