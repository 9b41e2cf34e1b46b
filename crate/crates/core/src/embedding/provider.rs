use std::collections::HashMap;

use serde_json::{json, Value};

use crate::llm::{http_support, LlmError};

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;

    /// One vector per input text, in order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LlmError>;
}

/// Client for the common `{model, input}` → `{data: [{embedding}]}` endpoint.
pub struct OpenAiEmbeddings {
    endpoint: String,
    model_id: String,
    auth_env: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiEmbeddings {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>, auth_env: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            auth_env,
            client: http_support::http_client(),
        }
    }

    pub fn request_body(model_id: &str, texts: &[&str]) -> Value {
        json!({ "model": model_id, "input": texts })
    }

    pub fn parse_response(v: &Value, expected: usize) -> Result<Vec<Vec<f64>>, LlmError> {
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::InvalidResponse("missing `data` array".into()))?;
        if data.len() != expected {
            return Err(LlmError::InvalidResponse(format!(
                "expected {expected} embeddings, got {}",
                data.len()
            )));
        }
        // Honour `index` when present; some servers reorder batch replies.
        let mut out: Vec<Option<Vec<f64>>> = vec![None; expected];
        for (pos, item) in data.iter().enumerate() {
            let slot = item
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| LlmError::InvalidResponse("missing `embedding`".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| LlmError::InvalidResponse("non-numeric component".into())))
                .collect::<Result<Vec<_>, _>>()?;
            let cell = out
                .get_mut(slot)
                .ok_or_else(|| LlmError::InvalidResponse(format!("index {slot} out of range")))?;
            *cell = Some(values);
        }
        out.into_iter()
            .map(|v| v.ok_or_else(|| LlmError::InvalidResponse("missing index in batch".into())))
            .collect()
    }
}

impl EmbeddingProvider for OpenAiEmbeddings {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LlmError> {
        let reply = http_support::post_json(
            &self.client,
            &self.endpoint,
            self.auth_env.as_deref(),
            &Self::request_body(&self.model_id, texts),
        )?;
        Self::parse_response(&reply, texts.len())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Offline embedder: signed feature hashing of lowercase word unigrams and
/// character trigrams. Texts sharing vocabulary get high cosine.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    model_id: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim: dim.max(2),
            model_id: format!("hashing-{}", dim.max(2)),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut bump = |feature: &[u8], weight: f64| {
            let h = fnv1a(feature);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign * weight;
        };
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            bump(word.as_bytes(), 1.0);
            let chars: Vec<char> = format!("#{word}#").chars().collect();
            for tri in chars.windows(3) {
                let s: String = tri.iter().collect();
                bump(s.as_bytes(), 0.5);
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            v[(fnv1a(text.as_bytes()) % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LlmError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Fixed text → vector table, with an optional fallback for unlisted text.
pub struct ScriptedEmbedder {
    model_id: String,
    table: HashMap<String, Vec<f64>>,
    fallback: Option<Box<dyn EmbeddingProvider>>,
}

impl ScriptedEmbedder {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            table: HashMap::new(),
            fallback: None,
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) {
        self.table.insert(text.into(), vector);
    }

    pub fn with_fallback(mut self, fallback: Box<dyn EmbeddingProvider>) -> Self {
        self.fallback = Some(fallback);
        self
    }
}

impl EmbeddingProvider for ScriptedEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LlmError> {
        texts
            .iter()
            .map(|t| match self.table.get(*t) {
                Some(v) => Ok(v.clone()),
                None => match &self.fallback {
                    Some(f) => Ok(f.embed_batch(&[t])?.remove(0)),
                    None => Err(LlmError::Unscripted {
                        prompt_hash: crate::llm::prompt_hash(t),
                    }),
                },
            })
            .collect()
    }
}
