use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{QueryLayout, TaskFileSchema};
use crate::embedding::DEFAULT_EMBEDDING_MODEL;
use crate::llm::ProviderProfile;
use crate::pipeline::ExperimentSettings;
use crate::prompts::{PromptSet, TEMPLATE_NAMES};

use super::RunError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatBackend {
    OpenaiCompatible,
    /// Offline replay of a JSON-lines script.
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatConfig {
    pub backend: ChatBackend,
    pub profile: ProviderProfile,
    pub mock_script: Option<PathBuf>,
    /// Answer unscripted prompts with the built-in synthetic responder.
    pub mock_fallback: bool,
    /// Append live replies to this script file.
    pub record_script: Option<PathBuf>,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self {
            backend: ChatBackend::Mock,
            profile: ProviderProfile::default(),
            mock_script: None,
            mock_fallback: true,
            record_script: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingBackend {
    OpenaiCompatible,
    /// Offline feature hashing.
    #[default]
    Hashing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub backend: EmbeddingBackend,
    pub endpoint: String,
    pub model_id: String,
    pub auth_env: Option<String>,
    /// Vector length for the hashing backend.
    pub dim: usize,
    pub batch_size: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            backend: EmbeddingBackend::Hashing,
            endpoint: "http://localhost:8000/v1/embeddings".into(),
            model_id: DEFAULT_EMBEDDING_MODEL.into(),
            auth_env: None,
            dim: 256,
            batch_size: 32,
        }
    }
}

impl EmbeddingConfig {
    /// Model identity recorded in the cache and fingerprint.
    pub fn effective_model_id(&self) -> String {
        match self.backend {
            EmbeddingBackend::OpenaiCompatible => self.model_id.clone(),
            EmbeddingBackend::Hashing => format!("hashing-{}", self.dim),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub source_dir: PathBuf,
    pub target_dir: PathBuf,
    pub schema: TaskFileSchema,
}

/// Full run configuration. Only the parts that change results enter the
/// fingerprint; paths, worker count, endpoints, credentials and retry
/// settings do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentSettings,
    pub chat: ChatConfig,
    pub embeddings: EmbeddingConfig,
    pub corpus: CorpusConfig,
    pub layout: QueryLayout,
    pub prompts_dir: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub runs_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentSettings::default(),
            chat: ChatConfig::default(),
            embeddings: EmbeddingConfig::default(),
            corpus: CorpusConfig::default(),
            layout: QueryLayout::default(),
            prompts_dir: None,
            cache_dir: PathBuf::from(".crossicl/cache"),
            runs_dir: PathBuf::from(".crossicl/runs"),
            workers: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let raw = fs::read_to_string(path).map_err(|e| RunError::User(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| RunError::User(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn prompt_set(&self) -> Result<PromptSet, RunError> {
        match &self.prompts_dir {
            Some(dir) => PromptSet::with_overrides(dir).map_err(|e| RunError::User(e.to_string())),
            None => Ok(PromptSet::builtin()),
        }
    }

    /// The result-affecting parts of the config plus content digests of
    /// the corpus, mock script and prompt templates.
    pub fn fingerprint_material(&self, corpus_digest: &str) -> Result<Value, RunError> {
        let script_digest = match (&self.chat.backend, &self.chat.mock_script) {
            (ChatBackend::Mock, Some(p)) => {
                let bytes = fs::read(p).map_err(|e| RunError::User(format!("{}: {e}", p.display())))?;
                Some(hex::encode(Sha256::digest(bytes)))
            }
            _ => None,
        };
        let prompts = self.prompt_set()?;
        let mut h = Sha256::new();
        for name in TEMPLATE_NAMES {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(prompts.source(name).unwrap_or_default().as_bytes());
            h.update([0]);
        }
        Ok(json!({
            "experiment": self.experiment,
            "chat": {
                "backend": self.chat.backend,
                "model_id": self.chat.profile.model_id,
                "temperature": self.chat.profile.temperature,
                "max_output_tokens": self.chat.profile.max_output_tokens,
                "mock_script_digest": script_digest,
                "mock_fallback": self.chat.backend == ChatBackend::Mock && self.chat.mock_fallback,
            },
            "embeddings": {
                "backend": self.embeddings.backend,
                "model_id": self.embeddings.effective_model_id(),
            },
            "corpus_digest": corpus_digest,
            "layout": self.layout,
            "prompts_digest": hex::encode(h.finalize()),
        }))
    }

    pub fn fingerprint(&self, corpus_digest: &str) -> Result<String, RunError> {
        Ok(fingerprint_value(&self.fingerprint_material(corpus_digest)?))
    }
}

/// JSON with object keys sorted at every level and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), sorted(&map[k]));
                }
                Value::Object(out)
            }
            Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sorted(v)).expect("json value serializes")
}

pub fn fingerprint_value(v: &Value) -> String {
    hex::encode(Sha256::digest(canonical_json(v).as_bytes()))
}
