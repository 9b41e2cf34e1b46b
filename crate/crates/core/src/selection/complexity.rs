use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::llm::{prompt_hash, Gateway, LlmError, TranscriptEntry};

/// Text complexity as seen by the scoring model.
pub trait ComplexityOracle: Send + Sync {
    fn perplexity(&self, text: &str) -> Result<f64, LlmError>;
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    model_id: String,
    text_hash: String,
    perplexity: f64,
}

/// Memoised perplexities, optionally persisted as JSON lines.
pub struct PerplexityCache {
    gateway: Gateway,
    memo: Mutex<HashMap<String, f64>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl PerplexityCache {
    pub fn new(gateway: Gateway) -> Self {
        Self {
            gateway,
            memo: Mutex::new(HashMap::new()),
            file: None,
        }
    }

    /// Loads earlier values for this model from `path` and appends new ones.
    pub fn with_file(mut self, path: &Path) -> Result<Self, LlmError> {
        let io = |e: std::io::Error| LlmError::Config(format!("{}: {e}", path.display()));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        if path.exists() {
            let model = &self.gateway.profile().model_id;
            let mut memo = self.memo.lock().expect("memo poisoned");
            for raw in fs::read_to_string(path).map_err(io)?.lines() {
                // A torn final line from an interrupted run is skipped.
                if let Ok(line) = serde_json::from_str::<Line>(raw) {
                    if &line.model_id == model {
                        memo.insert(line.text_hash, line.perplexity);
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        self.file = Some((path.to_path_buf(), Mutex::new(file)));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.memo.lock().expect("memo poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn take_transcript(&self) -> Vec<TranscriptEntry> {
        self.gateway.take_transcript()
    }
}

impl ComplexityOracle for PerplexityCache {
    fn perplexity(&self, text: &str) -> Result<f64, LlmError> {
        let key = prompt_hash(text);
        if let Some(v) = self.memo.lock().expect("memo poisoned").get(&key) {
            return Ok(*v);
        }
        let value = self.gateway.perplexity(text)?;
        self.memo.lock().expect("memo poisoned").insert(key.clone(), value);
        if let Some((path, file)) = &self.file {
            let line = serde_json::to_string(&Line {
                model_id: self.gateway.profile().model_id.clone(),
                text_hash: key,
                perplexity: value,
            })
            .expect("line json");
            writeln!(file.lock().expect("file poisoned"), "{line}")
                .map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        }
        Ok(value)
    }
}
