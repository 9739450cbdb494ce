//! In-memory dialogue sessions served by a trained model.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, BeliefState};
use crate::kb::{lexicalize, Kb, Record};
use crate::model::{DecodeOptions, Fsdm, ModelError};

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);
/// At most this many retrieved records are returned with a turn.
pub const MAX_RECORDS_SHOWN: usize = 5;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub belief: BeliefState,
    pub last_agent_response: Vec<String>,
    pub transcript: Vec<(Speaker, String)>,
}

impl Session {
    fn new(session_id: String) -> Self {
        Self { session_id, belief: BeliefState::new(), last_agent_response: Vec::new(), transcript: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub user_utterance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub session_id: String,
    pub belief: BeliefState,
    pub match_bin: usize,
    pub match_count: usize,
    pub response_text: String,
    pub delex_response: String,
    pub kb_records_shown: Vec<Record>,
}

struct Entry {
    session: Arc<Mutex<Session>>,
    last_used: Instant,
}

/// Sessions keyed by id, evicted after `ttl` without a turn.
pub struct SessionStore {
    ttl: Duration,
    entries: Mutex<HashMap<String, Entry>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        Self { ttl, entries: Mutex::new(HashMap::new()) }
    }

    fn evict(&self, entries: &mut HashMap<String, Entry>, now: Instant) {
        entries.retain(|_, e| now.duration_since(e.last_used) < self.ttl);
    }

    /// The session for `id`, created if absent or expired; a new id is drawn when none is given.
    pub fn checkout(&self, id: Option<&str>) -> (String, Arc<Mutex<Session>>) {
        let now = Instant::now();
        let mut entries = lock(&self.entries);
        self.evict(&mut entries, now);
        let id = id.map_or_else(|| uuid::Uuid::new_v4().to_string(), str::to_string);
        let entry = entries
            .entry(id.clone())
            .or_insert_with(|| Entry { session: Arc::new(Mutex::new(Session::new(id.clone()))), last_used: now });
        entry.last_used = now;
        (id, entry.session.clone())
    }

    pub fn remove(&self, id: &str) -> bool {
        lock(&self.entries).remove(id).is_some()
    }

    pub fn len(&self) -> usize {
        let mut entries = lock(&self.entries);
        self.evict(&mut entries, Instant::now());
        entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self, id: &str) -> Option<Session> {
        let entries = lock(&self.entries);
        entries.get(id).map(|e| lock(&e.session).clone())
    }
}

/// A model, its KB and the live sessions. Turns of one session run one at a
/// time; different sessions run concurrently.
pub struct DialogueService {
    pub model: Fsdm<f32>,
    pub kb: Kb,
    pub options: DecodeOptions,
    pub sessions: SessionStore,
}

impl DialogueService {
    pub fn new(model: Fsdm<f32>, kb: Kb, options: DecodeOptions) -> Self {
        Self { model, kb, options, sessions: SessionStore::new(DEFAULT_TTL) }
    }

    pub fn with_ttl(mut self, ttl: Duration) -> Self {
        self.sessions = SessionStore::new(ttl);
        self
    }

    /// Runs one turn. The session is left untouched when the request is
    /// rejected or the model fails.
    pub fn serve_turn(&self, request: &TurnRequest) -> Result<TurnResponse, ServiceError> {
        let user = tokenize(&request.user_utterance);
        if user.is_empty() {
            return Err(ServiceError::BadRequest("user_utterance is empty".into()));
        }
        if request.session_id.as_deref().is_some_and(|s| s.trim().is_empty()) {
            return Err(ServiceError::BadRequest("session_id is blank".into()));
        }
        let (id, session) = self.sessions.checkout(request.session_id.as_deref());
        let mut session = lock(&session);
        let p = self.model.predict_turn(&session.last_agent_response, &session.belief, &user, &self.kb, &self.options)?;
        let records: Vec<&Record> = p.kb_results.iter().collect();
        let response_text = lexicalize(&p.response, &records, &p.belief);
        session.transcript.push((Speaker::User, request.user_utterance.clone()));
        session.transcript.push((Speaker::Agent, response_text.clone()));
        session.belief = p.belief.clone();
        session.last_agent_response = p.response.clone();
        Ok(TurnResponse {
            session_id: id,
            belief: p.belief,
            match_bin: p.indicator.bin(),
            match_count: p.match_count,
            response_text,
            delex_response: p.response.join(" "),
            kb_records_shown: p.kb_results.into_iter().take(MAX_RECORDS_SHOWN).collect(),
        })
    }

    /// Drops `old` if given and opens a fresh session.
    pub fn reset(&self, old: Option<&str>) -> String {
        if let Some(id) = old {
            self.sessions.remove(id);
        }
        self.sessions.checkout(None).0
    }
}
