//! Chat-completion gateway: a provider contract, retries, rate limiting,
//! transcript capture and logprob-based perplexity.

mod http;
mod mock;

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::OpenAiChat;

pub(crate) mod http_support {
    pub(crate) use super::http::{http_client, post_json};
}
pub use mock::{load_script, synthetic_logprobs, MockProvider, PromptKind, RecordingProvider, Responder, ScriptEntry, SyntheticResponder};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    /// Retryable failure reported by a provider; the gateway turns an
    /// exhausted run of these into `Transport`.
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error("prompt exceeds the provider context window")]
    TooLong,
    #[error("no scripted response for prompt {prompt_hash}")]
    Unscripted { prompt_hash: String },
    #[error("provider does not expose token logprobs")]
    NoLogprobs,
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_transient(&self) -> bool {
        matches!(self, LlmError::Transient(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
    pub want_logprobs: bool,
}

impl ChatRequest {
    /// Pipeline prompts go out as one user message, no system message.
    pub fn single_user(prompt: &str, profile: &ProviderProfile) -> Self {
        Self {
            messages: vec![ChatMessage {
                role: Role::User,
                content: prompt.to_string(),
            }],
            temperature: profile.temperature,
            max_output_tokens: profile.max_output_tokens,
            model_id: profile.model_id.clone(),
            want_logprobs: false,
        }
    }

    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
            usage: Usage::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Sleep before attempt `i + 2`; the last entry repeats.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: vec![500, 2_000, 8_000],
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            backoff_ms: Vec::new(),
        }
    }

    fn delay_after(&self, attempt: u32) -> Duration {
        let idx = (attempt as usize).saturating_sub(1);
        let ms = self
            .backoff_ms
            .get(idx)
            .or(self.backoff_ms.last())
            .copied()
            .unwrap_or(0);
        Duration::from_millis(ms)
    }
}

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderProfile {
    /// Chat-completions URL.
    pub endpoint: String,
    /// Legacy completions URL used for echo-mode token scoring.
    pub completions_endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub retry: RetryPolicy,
    pub rate_limit_rpm: Option<u32>,
}

impl Default for ProviderProfile {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            completions_endpoint: None,
            auth_env: None,
            model_id: "Llama3.1-8B-Instruct".into(),
            temperature: 0.6,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            retry: RetryPolicy::default(),
            rate_limit_rpm: None,
        }
    }
}

impl ProviderProfile {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.retry.max_attempts < 1 {
            return Err(LlmError::Config("retry.max_attempts must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::Config("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::Config("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;

    fn send(&self, req: &ChatRequest, profile: &ProviderProfile) -> Result<ChatResponse, LlmError>;

    /// Per-token logprobs of `text` as scored by the model.
    fn score_tokens(&self, _text: &str, _profile: &ProviderProfile) -> Result<Vec<TokenLogprob>, LlmError> {
        Err(LlmError::NoLogprobs)
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// `exp(-mean(logprob))`.
pub fn perplexity_from_logprobs(logprobs: &[f64]) -> Option<f64> {
    if logprobs.is_empty() || logprobs.iter().any(|l| !l.is_finite()) {
        return None;
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Some((-mean).exp())
}

/// One provider call as written to `transcripts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub stage: String,
    pub prompt_hash: String,
    pub prompt: String,
    pub response: Option<String>,
    pub model_id: String,
    pub temperature: f64,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Default)]
struct RateLimiter {
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn wait(&self, rpm: Option<u32>) {
        let Some(rpm) = rpm.filter(|r| *r > 0) else {
            return;
        };
        let interval = Duration::from_secs_f64(60.0 / rpm as f64);
        let sleep_for = {
            let mut next = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + interval);
            slot.saturating_duration_since(now)
        };
        if !sleep_for.is_zero() {
            thread::sleep(sleep_for);
        }
    }
}

/// Provider plus profile plus a transcript buffer.
///
/// [`Gateway::fork`] shares the provider and rate limiter but starts a
/// fresh transcript, so parallel work items keep their own call logs and
/// can be merged in a fixed order afterwards.
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    profile: ProviderProfile,
    limiter: Arc<RateLimiter>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>, profile: ProviderProfile) -> Result<Self, LlmError> {
        profile.validate()?;
        Ok(Self {
            provider,
            profile,
            limiter: Arc::new(RateLimiter::default()),
            transcript: Mutex::new(Vec::new()),
        })
    }

    pub fn fork(&self) -> Self {
        Self {
            provider: Arc::clone(&self.provider),
            profile: self.profile.clone(),
            limiter: Arc::clone(&self.limiter),
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn profile(&self) -> &ProviderProfile {
        &self.profile
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn take_transcript(&self) -> Vec<TranscriptEntry> {
        std::mem::take(&mut *self.transcript.lock().expect("transcript poisoned"))
    }

    pub fn transcript_len(&self) -> usize {
        self.transcript.lock().expect("transcript poisoned").len()
    }

    fn record(&self, entry: TranscriptEntry) {
        self.transcript.lock().expect("transcript poisoned").push(entry);
    }

    /// Sends `prompt` as a single user message.
    pub fn complete(&self, stage: &str, prompt: &str) -> Result<ChatResponse, LlmError> {
        let req = ChatRequest::single_user(prompt, &self.profile);
        self.complete_request(stage, &req)
    }

    pub fn complete_request(&self, stage: &str, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let prompt = req.prompt_text();
        let (result, attempts) = self.send_with_retry(req);
        let (response, error) = match &result {
            Ok(r) => (Some(r.text.clone()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.record(TranscriptEntry {
            stage: stage.to_string(),
            prompt_hash: prompt_hash(&prompt),
            prompt,
            response,
            model_id: req.model_id.clone(),
            temperature: req.temperature,
            attempts,
            error,
        });
        result
    }

    fn send_with_retry(&self, req: &ChatRequest) -> (Result<ChatResponse, LlmError>, u32) {
        let max = self.profile.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            self.limiter.wait(self.profile.rate_limit_rpm);
            match self.provider.send(req, &self.profile) {
                Ok(resp) if resp.text.trim().is_empty() => {
                    return (Err(LlmError::EmptyCompletion), attempt)
                }
                Ok(resp) => return (Ok(resp), attempt),
                Err(LlmError::Transient(msg)) => {
                    tracing::debug!(attempt, %msg, "transient provider failure");
                    last = msg;
                    if attempt < max {
                        thread::sleep(self.profile.retry.delay_after(attempt));
                    }
                }
                Err(LlmError::Transport { message, .. }) => {
                    return (
                        Err(LlmError::Transport {
                            attempts: attempt,
                            message,
                        }),
                        attempt,
                    )
                }
                Err(other) => return (Err(other), attempt),
            }
        }
        (
            Err(LlmError::Transport {
                attempts: max,
                message: last,
            }),
            max,
        )
    }

    pub fn perplexity(&self, text: &str) -> Result<f64, LlmError> {
        if text.trim().is_empty() {
            return Err(LlmError::InvalidResponse("cannot score empty text".into()));
        }
        let max = self.profile.retry.max_attempts.max(1);
        let mut attempt = 0;
        let tokens = loop {
            attempt += 1;
            self.limiter.wait(self.profile.rate_limit_rpm);
            match self.provider.score_tokens(text, &self.profile) {
                Err(LlmError::Transient(msg)) if attempt < max => {
                    tracing::debug!(attempt, %msg, "transient scoring failure");
                    thread::sleep(self.profile.retry.delay_after(attempt));
                }
                Err(LlmError::Transient(message)) => {
                    return Err(LlmError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                other => break other?,
            }
        };
        let values: Vec<f64> = tokens.iter().map(|t| t.logprob).collect();
        let ppl = perplexity_from_logprobs(&values)
            .ok_or_else(|| LlmError::InvalidResponse("no scored tokens".into()))?;
        self.record(TranscriptEntry {
            stage: "perplexity".into(),
            prompt_hash: prompt_hash(text),
            prompt: text.to_string(),
            response: Some(format!("{ppl}")),
            model_id: self.profile.model_id.clone(),
            temperature: 0.0,
            attempts: attempt,
            error: None,
        });
        Ok(ppl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gateway(mock: MockProvider, attempts: u32) -> Gateway {
        let profile = ProviderProfile {
            retry: RetryPolicy::immediate(attempts),
            ..ProviderProfile::default()
        };
        Gateway::new(Arc::new(mock), profile).unwrap()
    }

    #[test]
    fn scripted_response_is_returned() {
        let mock = MockProvider::from_entries(vec![ScriptEntry::exact("P", "The final answer is: 2")]);
        let gw = gateway(mock, 1);
        assert_eq!(gw.complete("final", "P").unwrap().text, "The final answer is: 2");
        let log = gw.take_transcript();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].prompt_hash, prompt_hash("P"));
        assert_eq!(log[0].response.as_deref(), Some("The final answer is: 2"));
    }

    #[test]
    fn transient_failures_are_retried() {
        let mut entry = ScriptEntry::exact("P", "ok");
        entry.fail_times = 2;
        let gw = gateway(MockProvider::from_entries(vec![entry.clone()]), 3);
        let resp = gw.complete("final", "P").unwrap();
        assert_eq!(resp.text, "ok");
        assert_eq!(gw.take_transcript()[0].attempts, 3);

        let gw = gateway(MockProvider::from_entries(vec![entry]), 2);
        assert!(matches!(
            gw.complete("final", "P"),
            Err(LlmError::Transport { attempts: 2, .. })
        ));
    }

    #[test]
    fn unscripted_prompt_is_reported_by_hash() {
        let gw = gateway(MockProvider::from_entries(vec![]), 3);
        match gw.complete("final", "nothing here") {
            Err(LlmError::Unscripted { prompt_hash: h }) => assert_eq!(h, prompt_hash("nothing here")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_completion_is_an_error() {
        let gw = gateway(MockProvider::from_entries(vec![ScriptEntry::exact("P", "  ")]), 3);
        assert_eq!(gw.complete("final", "P"), Err(LlmError::EmptyCompletion));
    }

    #[test]
    fn perplexity_closed_forms() {
        assert_eq!(perplexity_from_logprobs(&[0.0, 0.0, 0.0]), Some(1.0));
        let ppl = perplexity_from_logprobs(&[-(2f64.ln()), -(8f64.ln())]).unwrap();
        assert!((ppl - 4.0).abs() < 1e-12);
        assert_eq!(perplexity_from_logprobs(&[]), None);
    }

    #[test]
    fn perplexity_requires_logprobs() {
        let gw = gateway(MockProvider::from_entries(vec![]).without_logprobs(), 1);
        assert_eq!(gw.perplexity("some text"), Err(LlmError::NoLogprobs));
        let gw = gateway(MockProvider::from_entries(vec![]), 1);
        assert!(gw.perplexity("some text").unwrap() > 0.0);
    }

    #[test]
    fn invalid_profile_rejected() {
        let profile = ProviderProfile {
            retry: RetryPolicy::immediate(0),
            ..ProviderProfile::default()
        };
        assert!(Gateway::new(Arc::new(MockProvider::from_entries(vec![])), profile).is_err());
    }

    proptest::proptest! {
        #[test]
        fn perplexity_ignores_token_order(mut lps in proptest::collection::vec(-10.0f64..0.0, 1..12), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let a = perplexity_from_logprobs(&lps).unwrap();
            lps.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = perplexity_from_logprobs(&lps).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-9 * a);
        }
    }
}
