use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::belief::{serialize_belief, BeliefState};
use super::dataset::Dialogue;
use super::schema::SlotSchema;
use super::text::tokenize;
use super::vocab::Vocab;
use super::CorpusError;

/// Model input and supervision for one dialogue turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnExample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub prev_response: Vec<String>,
    pub prev_belief: BeliefState,
    pub user_utterance: Vec<String>,
    pub gold_belief: BeliefState,
    pub gold_response: Vec<String>,
    pub gold_response_slots: BTreeSet<String>,
    pub gold_match_count: usize,
}

/// Placeholders of `schema` that occur in `tokens`.
pub fn response_slots_in<S: AsRef<str>>(tokens: &[S], schema: &SlotSchema) -> BTreeSet<String> {
    tokens.iter().map(AsRef::as_ref).filter(|t| schema.is_response_slot(t)).map(str::to_string).collect()
}

/// One example per turn; each turn sees the previous turn's gold belief and
/// delexicalized response.
pub fn make_turn_examples(dialogues: &[Dialogue], schema: &SlotSchema) -> Vec<TurnExample> {
    let mut out = Vec::with_capacity(dialogues.iter().map(|d| d.turns.len()).sum());
    for d in dialogues {
        let mut prev_response = Vec::new();
        let mut prev_belief = BeliefState::new();
        for (i, turn) in d.turns.iter().enumerate() {
            let gold_response = tokenize(&turn.agent_delex);
            out.push(TurnExample {
                dialogue_id: d.id.clone(),
                turn_index: i,
                prev_response: std::mem::take(&mut prev_response),
                prev_belief: std::mem::take(&mut prev_belief),
                user_utterance: tokenize(&turn.user),
                gold_belief: turn.belief.clone(),
                gold_response_slots: response_slots_in(&gold_response, schema),
                gold_response: gold_response.clone(),
                gold_match_count: turn.kb_match_count,
            });
            prev_response = gold_response;
            prev_belief = turn.belief.clone();
        }
    }
    out
}

/// Every token a model trained on `examples` reads or writes.
pub fn example_tokens<'a>(examples: &'a [TurnExample], schema: &'a SlotSchema) -> impl Iterator<Item = String> + 'a {
    examples.iter().flat_map(move |e| {
        let mut toks = e.user_utterance.clone();
        toks.extend(e.gold_response.iter().cloned());
        toks.extend(serialize_belief(&e.gold_belief, schema));
        toks
    })
}

/// Vocabulary over the tokens of `examples`.
pub fn build_vocab(examples: &[TurnExample], schema: &SlotSchema, min_count: usize) -> Result<Vocab, CorpusError> {
    let tokens: Vec<String> = example_tokens(examples, schema).collect();
    Vocab::build(tokens.iter().map(String::as_str), schema, min_count)
}
