//! Python module `fsdm`. Structured values (beliefs, records, reports,
//! configurations) cross the boundary as plain dicts and lists with the same
//! layout as their JSON form.

use std::path::PathBuf;
use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use fsdm::corpus::{self, BeliefState, CorpusConfig, Dialogue, SlotSchema};
use fsdm::kb::{self, Kb};
use fsdm::metrics::{self, DialogueOutcome};
use fsdm::model::{DecodeOptions, Fsdm};
use fsdm::service::{DialogueService, ServiceError, TurnRequest};
use fsdm::trainer::{self, BeliefFeed, DevSet, TrainConfig, Trainer};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn feed(name: &str) -> PyResult<BeliefFeed> {
    name.parse().map_err(value_err)
}

/// Informable and requestable slot inventory.
#[pyclass(name = "Schema", module = "fsdm", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySchema(SlotSchema);

#[pymethods]
impl PySchema {
    #[new]
    fn new(informable: Vec<String>, requestable: Vec<String>) -> PyResult<Self> {
        SlotSchema::new(informable, requestable).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn camrest() -> Self {
        Self(SlotSchema::camrest())
    }

    #[staticmethod]
    fn kvret() -> Self {
        Self(SlotSchema::kvret())
    }

    #[getter]
    fn informable_slots(&self) -> Vec<String> {
        self.0.informable_slots.clone()
    }

    #[getter]
    fn requestable_slots(&self) -> Vec<String> {
        self.0.requestable_slots.clone()
    }

    #[getter]
    fn response_slots(&self) -> Vec<String> {
        self.0.response_slots.clone()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Schema(informable={:?}, requestable={:?})", self.0.informable_slots, self.0.requestable_slots)
    }
}

#[pyclass(name = "KnowledgeBase", module = "fsdm", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKb(Kb);

#[pymethods]
impl PyKb {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Kb::load(&path).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Kb::from_json_str(text).map(Self).map_err(value_err)
    }

    #[getter]
    fn num_records(&self) -> usize {
        self.0.num_records()
    }

    /// Records matching every `attribute: value` constraint.
    fn query(&self, py: Python<'_>, constraints: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let c = from_py(constraints)?;
        let rows = self.0.query(&c).map_err(value_err)?;
        to_py(py, &rows)
    }

    fn query_belief(&self, py: Python<'_>, belief: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let b: BeliefState = from_py(belief)?;
        to_py(py, &self.0.query_belief(&b))
    }

    /// Fills placeholders of a delexicalized response from the records the belief retrieves.
    fn lexicalize(&self, delex: Vec<String>, belief: &Bound<'_, PyAny>) -> PyResult<String> {
        let b: BeliefState = from_py(belief)?;
        Ok(kb::lexicalize(&delex, &self.0.query_belief(&b), &b))
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.to_json())
    }
}

#[pyclass(name = "Model", module = "fsdm", frozen)]
struct PyModel(Fsdm<f32>);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        py.detach(|| Fsdm::<f32>::load(&path)).map(|(m, _)| Self(m)).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path, Value::Null).map_err(runtime_err)
    }

    #[getter]
    fn schema(&self) -> PySchema {
        PySchema(self.0.schema.clone())
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab.len()
    }

    /// Decodes one turn given the previous response tokens and belief.
    #[pyo3(signature = (user, kb, prev_belief=None, prev_response=Vec::new(), beam_width=1))]
    fn predict_turn(
        &self,
        py: Python<'_>,
        user: &str,
        kb: &PyKb,
        prev_belief: Option<&Bound<'_, PyAny>>,
        prev_response: Vec<String>,
        beam_width: usize,
    ) -> PyResult<Py<PyAny>> {
        let belief: BeliefState = prev_belief.map(from_py).transpose()?.unwrap_or_default();
        let user = corpus::tokenize(user);
        let opts = DecodeOptions { beam_width };
        let p = py.detach(|| self.0.predict_turn(&prev_response, &belief, &user, &kb.0, &opts)).map_err(value_err)?;
        to_py(py, &p)
    }

    /// Runs whole dialogues (canonical dict form) and returns per-dialogue outcomes.
    #[pyo3(signature = (dialogues, kb, belief_feed="predicted", beam_width=1))]
    fn run_inference(&self, py: Python<'_>, dialogues: &Bound<'_, PyAny>, kb: &PyKb, belief_feed: &str, beam_width: usize) -> PyResult<Py<PyAny>> {
        let dialogues: Vec<Dialogue> = from_py(dialogues)?;
        let feed = feed(belief_feed)?;
        let opts = DecodeOptions { beam_width };
        let out = py.detach(|| trainer::run_inference(&self.0, &dialogues, &kb.0, feed, &opts)).map_err(value_err)?;
        to_py(py, &out)
    }
}

/// Multi-session dialogue service over one model and KB.
#[pyclass(name = "Service", module = "fsdm", frozen)]
struct PyService(DialogueService);

#[pymethods]
impl PyService {
    #[new]
    #[pyo3(signature = (model, kb, beam_width=1, session_ttl=1800))]
    fn new(model: &PyModel, kb: &PyKb, beam_width: usize, session_ttl: u64) -> PyResult<Self> {
        if beam_width == 0 {
            return Err(value_err("beam width must be at least 1"));
        }
        let svc = DialogueService::new(model.0.clone(), kb.0.clone(), DecodeOptions { beam_width }).with_ttl(Duration::from_secs(session_ttl));
        Ok(Self(svc))
    }

    #[pyo3(signature = (user_utterance, session_id=None))]
    fn turn(&self, py: Python<'_>, user_utterance: String, session_id: Option<String>) -> PyResult<Py<PyAny>> {
        let req = TurnRequest { session_id, user_utterance };
        match py.detach(|| self.0.serve_turn(&req)) {
            Ok(r) => to_py(py, &r),
            Err(e @ ServiceError::BadRequest(_)) => Err(value_err(e)),
            Err(e) => Err(runtime_err(e)),
        }
    }

    #[pyo3(signature = (session_id=None))]
    fn reset(&self, session_id: Option<&str>) -> String {
        self.0.reset(session_id)
    }

    #[getter]
    fn num_sessions(&self) -> usize {
        self.0.sessions.len()
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

#[pyfunction]
fn serialize_belief(belief: &Bound<'_, PyAny>, schema: &PySchema) -> PyResult<Vec<String>> {
    let b: BeliefState = from_py(belief)?;
    b.validate(&schema.0).map_err(value_err)?;
    Ok(corpus::serialize_belief(&b, &schema.0))
}

/// Returns `(belief, valid)`.
#[pyfunction]
fn parse_belief(py: Python<'_>, tokens: Vec<String>, schema: &PySchema) -> PyResult<(Py<PyAny>, bool)> {
    let p = corpus::parse_belief(&tokens, &schema.0);
    Ok((to_py(py, &p.belief)?, p.valid))
}

#[pyfunction]
fn match_bin(count: usize) -> usize {
    kb::encode_match_count(count).bin()
}

#[pyfunction]
fn bleu(candidates: Vec<Vec<String>>, references: Vec<Vec<String>>) -> PyResult<f64> {
    if candidates.len() != references.len() {
        return Err(value_err("candidates and references differ in length"));
    }
    Ok(metrics::bleu(&candidates, &references))
}

/// Scores outcomes from `Model.run_inference`.
#[pyfunction]
fn evaluate(py: Python<'_>, outcomes: &Bound<'_, PyAny>, kb: &PyKb, schema: &PySchema) -> PyResult<Py<PyAny>> {
    let outcomes: Vec<DialogueOutcome> = from_py(outcomes)?;
    to_py(py, &metrics::evaluate(&outcomes, &kb.0, &schema.0))
}

/// Loads a corpus from a config dict and returns `(schema, kb, {split: dialogues})`.
#[pyfunction]
fn load_corpus(py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<(PySchema, PyKb, Py<PyAny>)> {
    let config: CorpusConfig = from_py(config)?;
    let c = py.detach(|| corpus::load_corpus(&config)).map_err(value_err)?;
    let splits = PyDict::new(py);
    for (name, d) in [("train", &c.train), ("dev", &c.dev), ("test", &c.test)] {
        splits.set_item(name, to_py(py, d)?)?;
    }
    Ok((PySchema(c.schema), PyKb(c.kb), splits.into_any().unbind()))
}

/// The training defaults for `preset` ("camrest" or "kvret") with `overrides` applied.
#[pyfunction]
#[pyo3(signature = (preset="camrest", overrides=None))]
fn train_config(py: Python<'_>, preset: &str, overrides: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    to_py(py, &merged_config(preset, overrides)?)
}

fn merged_config(preset: &str, overrides: Option<&Bound<'_, PyAny>>) -> PyResult<TrainConfig> {
    let base = match preset {
        "camrest" => TrainConfig::camrest(),
        "kvret" => TrainConfig::kvret(),
        other => return Err(value_err(format!("unknown preset `{other}`"))),
    };
    let Some(o) = overrides else { return Ok(base) };
    let Value::Object(fields) = from_py::<Value>(o)? else {
        return Err(value_err("overrides must be a dict"));
    };
    let mut merged = serde_json::to_value(&base).map_err(runtime_err)?;
    merged.as_object_mut().expect("object").extend(fields);
    let config: TrainConfig = serde_json::from_value(merged).map_err(value_err)?;
    config.validate().map_err(value_err)?;
    Ok(config)
}

/// Trains on a corpus config dict. Returns `(model, outcome)`; when `out_dir`
/// is given the selected weights go to `out_dir/best` and the log to
/// `out_dir/train_log.jsonl`.
#[pyfunction]
#[pyo3(signature = (corpus, preset="camrest", overrides=None, out_dir=None))]
fn train(
    py: Python<'_>,
    corpus: &Bound<'_, PyAny>,
    preset: &str,
    overrides: Option<&Bound<'_, PyAny>>,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let corpus_config: CorpusConfig = from_py(corpus)?;
    let config = merged_config(preset, overrides)?;
    let (model, outcome) = py
        .detach(|| -> Result<_, String> {
            let c = corpus::load_corpus(&corpus_config).map_err(|e| e.to_string())?;
            let examples = corpus::make_turn_examples(&c.train, &c.schema);
            let model = trainer::build_model(&config, &c.schema, &examples).map_err(|e| e.to_string())?;
            let mut t = Trainer::new(model, config).map_err(|e| e.to_string())?;
            let dev = (!c.dev.is_empty()).then_some(DevSet { dialogues: &c.dev, kb: &c.kb });
            let outcome = match &out_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| format!("creating {}: {e}", dir.display()))?;
                    let mut log = trainer::open_log(&dir.join("train_log.jsonl")).map_err(|e| e.to_string())?;
                    let o = t.fit(&examples, dev, Some(dir), &mut log).map_err(|e| e.to_string())?;
                    let best = Fsdm::<f32>::load(&dir.join("best")).map_err(|e| e.to_string())?.0;
                    t.model = best;
                    o
                }
                None => t.fit(&examples, dev, None, &mut std::io::sink()).map_err(|e| e.to_string())?,
            };
            Ok((t.model, outcome))
        })
        .map_err(runtime_err)?;
    Ok((PyModel(model), to_py(py, &outcome)?))
}

#[pymodule]
#[pyo3(name = "fsdm")]
pub fn fsdm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchema>()?;
    m.add_class::<PyKb>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyService>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_belief, m)?)?;
    m.add_function(wrap_pyfunction!(parse_belief, m)?)?;
    m.add_function(wrap_pyfunction!(match_bin, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
