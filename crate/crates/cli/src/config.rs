//! Run configuration file. Command-line flags and `FSDM_*` environment
//! variables take precedence over it.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use fsdm::corpus::{CorpusConfig, CorpusFormat, Split};
use fsdm::trainer::{BeliefFeed, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Camrest,
    Kvret,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Hyperparameter defaults; follows the corpus format when absent.
    pub preset: Option<Preset>,
    pub corpus: Option<CorpusConfig>,
    /// Fields of the training configuration that differ from the preset.
    #[serde(default)]
    pub train: Option<Value>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub port: Option<u16>,
    pub split: Option<Split>,
    pub belief_feed: Option<BeliefFeed>,
    pub beam_width: Option<usize>,
}

impl FileConfig {
    /// Reads `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: FileConfig = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(c) = &mut cfg.corpus {
            c.resolve_paths(base);
        }
        for p in [&mut cfg.out_dir, &mut cfg.checkpoint, &mut cfg.kb].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(Value::Object(train)) = &mut cfg.train {
            if let Some(Value::String(e)) = train.get("embeddings") {
                let p = Path::new(e);
                if p.is_relative() {
                    train.insert("embeddings".into(), Value::String(base.join(p).to_string_lossy().into_owned()));
                }
            }
        }
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn corpus(&self) -> Result<&CorpusConfig, CliError> {
        self.corpus.as_ref().ok_or_else(|| CliError::config("the configuration has no `corpus` section"))
    }

    /// The preset's training configuration with the file's `train` fields applied.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let preset = self.preset.unwrap_or(match self.corpus.as_ref().map(|c| c.format) {
            Some(CorpusFormat::Kvret) => Preset::Kvret,
            _ => Preset::Camrest,
        });
        let base = match preset {
            Preset::Camrest => TrainConfig::camrest(),
            Preset::Kvret => TrainConfig::kvret(),
        };
        let Some(overrides) = &self.train else { return Ok(base) };
        let Value::Object(fields) = overrides else {
            return Err(CliError::config("`train` must be an object"));
        };
        let mut merged = serde_json::to_value(&base).expect("train config serializes");
        merged.as_object_mut().expect("object").extend(fields.clone());
        serde_json::from_value(merged).map_err(|e| CliError::config(format!("train: {e}")))
    }
}
