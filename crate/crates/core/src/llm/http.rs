use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, ChatResponse, LlmError, ProviderProfile, TokenLogprob, Usage};

/// POSTs a JSON body and returns the decoded JSON reply, classifying
/// failures into transient (retryable) and terminal errors.
pub(crate) fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    auth_env: Option<&str>,
    body: &Value,
) -> Result<Value, LlmError> {
    let mut request = client.post(url).json(body);
    if let Some(var) = auth_env {
        let token = std::env::var(var)
            .map_err(|_| LlmError::Config(format!("environment variable `{var}` is not set")))?;
        request = request.bearer_auth(token);
    }
    let response = request
        .send()
        .map_err(|e| LlmError::Transient(e.to_string()))?;
    let status = response.status();
    let text = response
        .text()
        .map_err(|e| LlmError::Transient(e.to_string()))?;
    if status.as_u16() == 429 || status.is_server_error() {
        return Err(LlmError::Transient(format!("HTTP {status}: {text}")));
    }
    if !status.is_success() {
        let lower = text.to_ascii_lowercase();
        if lower.contains("context") && (lower.contains("length") || lower.contains("too long") || lower.contains("maximum")) {
            return Err(LlmError::TooLong);
        }
        return Err(LlmError::Transport {
            attempts: 1,
            message: format!("HTTP {status}: {text}"),
        });
    }
    serde_json::from_str(&text).map_err(|e| LlmError::InvalidResponse(e.to_string()))
}

pub(crate) fn http_client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(300))
        .build()
        .expect("http client")
}

/// Client for servers speaking the common chat-completions JSON shape
/// (OpenAI, vLLM, llama.cpp server, ...).
pub struct OpenAiChat {
    client: reqwest::blocking::Client,
}

impl Default for OpenAiChat {
    fn default() -> Self {
        Self::new()
    }
}

impl OpenAiChat {
    pub fn new() -> Self {
        Self {
            client: http_client(),
        }
    }

    pub fn request_body(req: &ChatRequest) -> Value {
        let mut body = json!({
            "model": req.model_id,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if req.want_logprobs {
            body["logprobs"] = Value::Bool(true);
        }
        body
    }

    pub fn parse_response(v: &Value) -> Result<ChatResponse, LlmError> {
        let choice = v
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| LlmError::InvalidResponse("missing choices[0]".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        if choice.get("finish_reason").and_then(Value::as_str) == Some("length") && text.is_empty() {
            return Err(LlmError::TooLong);
        }
        let token_logprobs = choice
            .pointer("/logprobs/content")
            .and_then(Value::as_array)
            .map(|items| {
                items
                    .iter()
                    .filter_map(|t| {
                        Some(TokenLogprob {
                            token: t.get("token")?.as_str()?.to_string(),
                            logprob: t.get("logprob")?.as_f64()?,
                        })
                    })
                    .collect()
            });
        let usage = Usage {
            prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0) as u32,
            output_tokens: v
                .pointer("/usage/completion_tokens")
                .and_then(Value::as_u64)
                .unwrap_or(0) as u32,
        };
        Ok(ChatResponse {
            text,
            token_logprobs,
            usage,
        })
    }

    /// Echo-mode scoring reply: `choices[0].logprobs.{tokens, token_logprobs}`.
    /// The first token has no conditional logprob and is skipped.
    pub fn parse_echo_logprobs(v: &Value) -> Result<Vec<TokenLogprob>, LlmError> {
        let lp = v
            .pointer("/choices/0/logprobs")
            .ok_or_else(|| LlmError::InvalidResponse("missing choices[0].logprobs".into()))?;
        let tokens = lp.get("tokens").and_then(Value::as_array);
        let values = lp.get("token_logprobs").and_then(Value::as_array);
        let (Some(tokens), Some(values)) = (tokens, values) else {
            return Err(LlmError::NoLogprobs);
        };
        Ok(tokens
            .iter()
            .zip(values)
            .filter_map(|(t, l)| {
                Some(TokenLogprob {
                    token: t.as_str()?.to_string(),
                    logprob: l.as_f64()?,
                })
            })
            .collect())
    }
}

impl ChatProvider for OpenAiChat {
    fn name(&self) -> &str {
        "openai"
    }

    fn send(&self, req: &ChatRequest, profile: &ProviderProfile) -> Result<ChatResponse, LlmError> {
        let reply = post_json(
            &self.client,
            &profile.endpoint,
            profile.auth_env.as_deref(),
            &Self::request_body(req),
        )?;
        Self::parse_response(&reply)
    }

    fn score_tokens(&self, text: &str, profile: &ProviderProfile) -> Result<Vec<TokenLogprob>, LlmError> {
        let url = profile.completions_endpoint.as_deref().ok_or(LlmError::NoLogprobs)?;
        let body = json!({
            "model": profile.model_id,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let reply = post_json(&self.client, url, profile.auth_env.as_deref(), &body)?;
        Self::parse_echo_logprobs(&reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, Role};

    #[test]
    fn body_has_common_shape() {
        let req = ChatRequest {
            messages: vec![ChatMessage {
                role: Role::User,
                content: "hi".into(),
            }],
            temperature: 0.7,
            max_output_tokens: 1024,
            model_id: "m".into(),
            want_logprobs: true,
        };
        let body = OpenAiChat::request_body(&req);
        assert_eq!(
            body,
            json!({"model": "m", "messages": [{"role": "user", "content": "hi"}],
                   "temperature": 0.7, "max_tokens": 1024, "logprobs": true})
        );
    }

    #[test]
    fn parses_choices_and_logprobs() {
        let v = json!({
            "choices": [{"message": {"role": "assistant", "content": "The final answer is: 2"},
                          "logprobs": {"content": [{"token": "The", "logprob": -0.1}]}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 7}
        });
        let r = OpenAiChat::parse_response(&v).unwrap();
        assert_eq!(r.text, "The final answer is: 2");
        assert_eq!(r.usage.output_tokens, 7);
        assert_eq!(r.token_logprobs.unwrap()[0].logprob, -0.1);
        assert!(OpenAiChat::parse_response(&json!({"choices": []})).is_err());
    }

    #[test]
    fn parses_echo_logprobs_skipping_null_head() {
        let v = json!({"choices": [{"logprobs": {"tokens": ["a", "b", "c"], "token_logprobs": [null, -1.0, -2.0]}}]});
        let lps = OpenAiChat::parse_echo_logprobs(&v).unwrap();
        assert_eq!(lps.len(), 2);
        assert_eq!(lps[1].token, "c");
    }
}
