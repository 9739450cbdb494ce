use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::belief::BeliefState;
use super::raw;
use super::schema::SlotSchema;
use super::CorpusError;
use crate::kb::Kb;

/// One annotated turn: the user's utterance, the agent's reply (raw and
/// delexicalized) and the belief after the user spoke.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub agent_raw: String,
    pub agent_delex: String,
    pub belief: BeliefState,
    pub kb_match_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// On-disk layout of one canonical split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalFile {
    pub schema: SlotSchema,
    pub dialogues: Vec<Dialogue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Canonical,
    Camrest,
    Kvret,
}

impl std::str::FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical" => Ok(Self::Canonical),
            "camrest" => Ok(Self::Camrest),
            "kvret" => Ok(Self::Kvret),
            other => Err(CorpusError::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| CorpusError::Config(format!("unknown split `{s}` (expected train, dev or test)")))
    }
}

/// Expected dialogue counts per split and, optionally, KB size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    #[serde(default)]
    pub kb_records: Option<usize>,
}

impl SplitManifest {
    pub fn camrest() -> Self {
        Self { train: 408, dev: 136, test: 136, kb_records: Some(99) }
    }

    pub fn kvret() -> Self {
        Self { train: 2425, dev: 302, test: 302, kb_records: Some(284) }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

/// Where a corpus lives and how to read it.
///
/// For the `camrest` format `train` may be the single full dialogue file;
/// when `dev` and `test` are absent it is cut in file order using the
/// manifest counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub format: CorpusFormat,
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub kb: Option<PathBuf>,
    /// Overrides the format's built-in slot schema.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<SplitManifest>,
}

impl CorpusConfig {
    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train);
        for p in [&mut self.dev, &mut self.test, &mut self.kb, &mut self.schema].into_iter().flatten() {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub schema: SlotSchema,
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub kb: Kb,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Dialogue] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Checks split sizes and KB size against a manifest.
    pub fn check_manifest(&self, manifest: &SplitManifest) -> Result<(), CorpusError> {
        for split in Split::ALL {
            let found = self.split(split).len();
            if found != manifest.count(split) {
                return Err(CorpusError::Manifest { what: split.name().into(), expected: manifest.count(split), found });
            }
        }
        if let Some(expected) = manifest.kb_records {
            if self.kb.num_records() != expected {
                return Err(CorpusError::Manifest { what: "kb records".into(), expected, found: self.kb.num_records() });
            }
        }
        Ok(())
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, CorpusError> {
    serde_json::from_str(text).map_err(|e| CorpusError::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Checks every turn's belief against the schema.
pub fn validate_dialogues(dialogues: &[Dialogue], schema: &SlotSchema) -> Result<(), CorpusError> {
    for d in dialogues {
        for (t, turn) in d.turns.iter().enumerate() {
            let unknown = turn
                .belief
                .informable()
                .keys()
                .find(|s| !schema.is_informable(s))
                .or_else(|| turn.belief.requestable().iter().find(|s| !schema.is_requestable(s)));
            if let Some(slot) = unknown {
                return Err(CorpusError::UnknownSlot { dialogue: d.id.clone(), turn: t, slot: slot.clone() });
            }
            turn.belief.validate(schema).map_err(|e| CorpusError::Annotation {
                dialogue: d.id.clone(),
                turn: t,
                message: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// Reads one canonical split file.
pub fn load_canonical(path: &Path) -> Result<CanonicalFile, CorpusError> {
    let file: CanonicalFile = parse_json(path, &read_text(path)?)?;
    file.schema.validate()?;
    validate_dialogues(&file.dialogues, &file.schema)?;
    Ok(file)
}

pub fn save_canonical(path: &Path, file: &CanonicalFile) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(file).expect("canonical data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

fn load_schema_override(path: &Path) -> Result<SlotSchema, CorpusError> {
    let schema: SlotSchema = parse_json(path, &read_text(path)?)?;
    schema.validate()?;
    Ok(schema)
}

/// Loads all three splits and the KB, then checks the manifest if one is given.
pub fn load_corpus(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    let schema_override = config.schema.as_deref().map(load_schema_override).transpose()?;
    let corpus = match config.format {
        CorpusFormat::Canonical => {
            let train = load_canonical(&config.train)?;
            let overridden = schema_override.is_some();
            let schema = schema_override.unwrap_or_else(|| train.schema.clone());
            let mut splits = vec![train.dialogues];
            for path in [&config.dev, &config.test] {
                match path {
                    Some(p) => {
                        let f = load_canonical(p)?;
                        if !overridden && f.schema != schema {
                            return Err(CorpusError::Schema(format!("{} has a different schema", p.display())));
                        }
                        splits.push(f.dialogues);
                    }
                    None => splits.push(Vec::new()),
                }
            }
            for dialogues in &splits {
                validate_dialogues(dialogues, &schema)?;
            }
            let kb = match &config.kb {
                Some(p) => Kb::load(p)?,
                None => Kb::default(),
            };
            let test = splits.pop().unwrap_or_default();
            let dev = splits.pop().unwrap_or_default();
            let train = splits.pop().unwrap_or_default();
            Corpus { schema, train, dev, test, kb }
        }
        CorpusFormat::Camrest => raw::load_camrest(config, schema_override.unwrap_or_else(SlotSchema::camrest))?,
        CorpusFormat::Kvret => raw::load_kvret(config, schema_override.unwrap_or_else(SlotSchema::kvret))?,
    };
    if let Some(m) = &config.manifest {
        corpus.check_manifest(m)?;
    }
    Ok(corpus)
}
