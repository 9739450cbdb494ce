//! Converters from the original CamRest676 and KVRET release layouts into
//! canonical dialogues.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use super::belief::BeliefState;
use super::dataset::{parse_json, read_text, Corpus, CorpusConfig, Dialogue, SplitManifest, Turn};
use super::schema::SlotSchema;
use super::text::{tokenize, Delexicalizer};
use super::CorpusError;
use crate::kb::{Kb, KbTable, Record};

/// CamRest annotations and database use `pricerange`; the schema says `price`.
fn camrest_slot(name: &str) -> &str {
    match name {
        "pricerange" => "price",
        other => other,
    }
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn ann_err(dialogue: &str, turn: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Annotation { dialogue: dialogue.to_string(), turn, message: message.into() }
}

/// Reads the CamRest database: scalar fields become strings, nested ones are dropped.
pub fn load_camrest_db(path: &Path) -> Result<Kb, CorpusError> {
    let raw: Vec<serde_json::Map<String, Value>> = parse_json(path, &read_text(path)?)?;
    let records = raw
        .iter()
        .map(|obj| obj.iter().filter_map(|(k, v)| Some((camrest_slot(k).to_string(), scalar_string(v)?))).collect())
        .collect();
    Ok(Kb::new(vec![KbTable::new("restaurant", records)]))
}

/// Converts CamRest676-style dialogues.
///
/// Informable values accumulate over the dialogue (a later inform for the
/// same slot replaces the earlier value); requests hold for their turn only.
pub fn convert_camrest(raw: &[Value], schema: &SlotSchema, kb: &Kb) -> Result<Vec<Dialogue>, CorpusError> {
    let delex = Delexicalizer::from_records(kb.records(), schema);
    let mut out = Vec::with_capacity(raw.len());
    for (n, d) in raw.iter().enumerate() {
        let id = d.get("dialogue_id").and_then(scalar_string).unwrap_or_else(|| n.to_string());
        let turns = d.get("dial").and_then(Value::as_array).ok_or_else(|| ann_err(&id, 0, "missing `dial` list"))?;
        let mut belief = BeliefState::new();
        let mut converted = Vec::with_capacity(turns.len());
        for (t, turn) in turns.iter().enumerate() {
            let user = turn.pointer("/usr/transcript").and_then(Value::as_str).ok_or_else(|| ann_err(&id, t, "missing usr.transcript"))?;
            let agent = turn.pointer("/sys/sent").and_then(Value::as_str).ok_or_else(|| ann_err(&id, t, "missing sys.sent"))?;
            belief.clear_requests();
            for act in turn.pointer("/usr/slu").and_then(Value::as_array).into_iter().flatten() {
                let kind = act.get("act").and_then(Value::as_str).unwrap_or_default();
                for pair in act.get("slots").and_then(Value::as_array).into_iter().flatten() {
                    let (Some(a), Some(b)) = (pair.get(0).and_then(Value::as_str), pair.get(1).and_then(Value::as_str)) else {
                        return Err(ann_err(&id, t, format!("malformed slot pair {pair}")));
                    };
                    match kind {
                        "inform" => {
                            let slot = camrest_slot(a);
                            if !schema.is_informable(slot) {
                                return Err(CorpusError::UnknownSlot { dialogue: id.clone(), turn: t, slot: slot.into() });
                            }
                            belief.set_value(slot, tokenize(b));
                        }
                        "request" => {
                            let slot = camrest_slot(b);
                            if !schema.is_requestable(slot) {
                                return Err(CorpusError::UnknownSlot { dialogue: id.clone(), turn: t, slot: slot.into() });
                            }
                            belief.request(slot);
                        }
                        _ => {}
                    }
                }
            }
            converted.push(make_turn(user, agent, &belief, &delex, kb));
        }
        out.push(Dialogue { id, turns: converted });
    }
    Ok(out)
}

fn make_turn(user: &str, agent: &str, belief: &BeliefState, delex: &Delexicalizer, kb: &Kb) -> Turn {
    Turn {
        user: user.to_string(),
        agent_raw: agent.to_string(),
        agent_delex: delex.apply(agent).join(" "),
        belief: belief.clone(),
        kb_match_count: kb.query_belief(belief).len(),
    }
}

pub(crate) fn load_camrest(config: &CorpusConfig, schema: SlotSchema) -> Result<Corpus, CorpusError> {
    let kb_path = config.kb.as_deref().ok_or_else(|| CorpusError::Config("camrest format needs a `kb` path".into()))?;
    let kb = load_camrest_db(kb_path)?;
    let read = |p: &Path| -> Result<Vec<Dialogue>, CorpusError> {
        let raw: Vec<Value> = parse_json(p, &read_text(p)?)?;
        convert_camrest(&raw, &schema, &kb)
    };
    let mut train = read(&config.train)?;
    let (dev, test) = match (&config.dev, &config.test) {
        (Some(d), Some(t)) => (read(d)?, read(t)?),
        (None, None) => {
            let m = config.manifest.unwrap_or_else(SplitManifest::camrest);
            let total = m.train + m.dev + m.test;
            if train.len() != total {
                return Err(CorpusError::Manifest { what: "dialogues in the full file".into(), expected: total, found: train.len() });
            }
            let test = train.split_off(m.train + m.dev);
            let dev = train.split_off(m.train);
            (dev, test)
        }
        _ => return Err(CorpusError::Config("give both `dev` and `test`, or neither".into())),
    };
    Ok(Corpus { schema, train, dev, test, kb })
}

/// Domain table name from a KVRET scenario intent.
fn kvret_table(intent: &str) -> String {
    match intent {
        "navigate" => "navigate",
        "weather" => "weather",
        "schedule" => "schedule",
        _ => "other",
    }
    .to_string()
}

/// Collects every scenario KB, one table per domain, de-duplicating records.
pub fn kvret_kb<'a>(raw: impl IntoIterator<Item = &'a Value>) -> Kb {
    let mut tables: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for d in raw {
        let intent = d.pointer("/scenario/task/intent").and_then(Value::as_str).unwrap_or_default();
        let table = tables.entry(kvret_table(intent)).or_default();
        for item in kvret_items(d) {
            if !table.contains(&item) {
                table.push(item);
            }
        }
    }
    Kb::new(tables.into_iter().map(|(name, records)| KbTable::new(name, records)).collect())
}

fn kvret_items(d: &Value) -> Vec<Record> {
    d.pointer("/scenario/kb/items")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter_map(Value::as_object)
        .map(|obj| obj.iter().filter_map(|(k, v)| Some((k.clone(), scalar_string(v)?))).collect())
        .collect()
}

/// Converts KVRET-style dialogues. Consecutive driver utterances are joined;
/// each assistant utterance closes a turn and carries that turn's
/// annotations. A trailing driver utterance with no reply is dropped.
///
/// `slots` entries naming a requestable-only slot are ignored; entries naming
/// no schema slot at all are errors.
pub fn convert_kvret(raw: &[Value], schema: &SlotSchema, kb: &Kb) -> Result<Vec<Dialogue>, CorpusError> {
    let mut out = Vec::with_capacity(raw.len());
    for (n, d) in raw.iter().enumerate() {
        let id = d.pointer("/scenario/uuid").and_then(scalar_string).unwrap_or_else(|| n.to_string());
        let items = kvret_items(d);
        let delex = Delexicalizer::from_records(&items, schema);
        let mut belief = BeliefState::new();
        let mut pending: Vec<String> = Vec::new();
        let mut turns = Vec::new();
        let steps = d.get("dialogue").and_then(Value::as_array).ok_or_else(|| ann_err(&id, 0, "missing `dialogue` list"))?;
        for step in steps {
            let who = step.get("turn").and_then(Value::as_str).unwrap_or_default();
            let utterance = step.pointer("/data/utterance").and_then(Value::as_str).unwrap_or_default();
            if who == "driver" {
                pending.push(utterance.to_string());
                continue;
            }
            let t = turns.len();
            if pending.is_empty() {
                return Err(ann_err(&id, t, "assistant turn without a preceding driver turn"));
            }
            belief.clear_requests();
            if let Some(slots) = step.pointer("/data/slots").and_then(Value::as_object) {
                for (slot, v) in slots {
                    let value = scalar_string(v).unwrap_or_default();
                    if schema.is_informable(slot) {
                        belief.set_value(slot.clone(), tokenize(&value));
                    } else if !schema.is_requestable(slot) {
                        return Err(CorpusError::UnknownSlot { dialogue: id.clone(), turn: t, slot: slot.clone() });
                    }
                }
            }
            if let Some(req) = step.pointer("/data/requested").and_then(Value::as_object) {
                for (slot, flag) in req {
                    if !schema.is_requestable(slot) {
                        return Err(CorpusError::UnknownSlot { dialogue: id.clone(), turn: t, slot: slot.clone() });
                    }
                    if flag.as_bool() == Some(true) {
                        belief.request(slot.clone());
                    }
                }
            }
            turns.push(make_turn(&std::mem::take(&mut pending).join(" "), utterance, &belief, &delex, kb));
        }
        out.push(Dialogue { id, turns });
    }
    Ok(out)
}

pub(crate) fn load_kvret(config: &CorpusConfig, schema: SlotSchema) -> Result<Corpus, CorpusError> {
    let (Some(dev_path), Some(test_path)) = (&config.dev, &config.test) else {
        return Err(CorpusError::Config("kvret format needs `train`, `dev` and `test` files".into()));
    };
    let mut raws = Vec::with_capacity(3);
    for p in [&config.train, dev_path, test_path] {
        let raw: Vec<Value> = parse_json(p, &read_text(p)?)?;
        raws.push(raw);
    }
    let kb = match &config.kb {
        Some(p) => Kb::load(p)?,
        None => kvret_kb(raws.iter().flatten()),
    };
    let mut splits = Vec::with_capacity(3);
    for raw in &raws {
        splits.push(convert_kvret(raw, &schema, &kb)?);
    }
    let test = splits.pop().unwrap_or_default();
    let dev = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Corpus { schema, train, dev, test, kb })
}
