//! Offline providers: a scripted mock keyed by prompt hash, a synthetic
//! responder that answers every pipeline prompt shape, and a recorder that
//! captures live responses into a replayable script.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{prompt_hash, ChatProvider, ChatRequest, ChatResponse, LlmError, ProviderProfile, TokenLogprob};
use crate::prompts::{extract_tag, ANSWER_MARKER};

/// Which pipeline stage a prompt belongs to, recognised from the fixed
/// wording of each template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Transform,
    Refine,
    Label,
    OneStep,
    Template,
    Final,
}

impl PromptKind {
    pub fn classify(prompt: &str) -> Self {
        if prompt.contains("synthesize a new pair of Target Task Query and Answer") {
            PromptKind::OneStep
        } else if prompt.contains("Please rewrite the Source Task Query to synthesize a new Target Task Query.") {
            PromptKind::Transform
        } else if prompt.contains("Could you help me refine the synthesized query?") {
            PromptKind::Refine
        } else if prompt.contains("Please generate a response to the following target task question:") {
            PromptKind::Label
        } else if prompt.contains("please summarize the template of its inputs") {
            PromptKind::Template
        } else {
            PromptKind::Final
        }
    }
}

/// One line of a mock script (JSON-lines).
///
/// Matching order: entries keyed by `prompt_hash`/`prompt` first, then rule
/// entries (`contains` and/or `kind`) in file order. An entry with no key at
/// all matches every prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PromptKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub response: String,
    /// Number of transient failures to report before answering.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_times: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl ScriptEntry {
    pub fn exact(prompt: &str, response: &str) -> Self {
        Self {
            prompt_hash: Some(prompt_hash(prompt)),
            prompt: None,
            contains: None,
            kind: None,
            temperature: None,
            response: response.into(),
            fail_times: 0,
        }
    }

    pub fn rule(kind: Option<PromptKind>, contains: Option<&str>, response: &str) -> Self {
        Self {
            prompt_hash: None,
            prompt: None,
            contains: contains.map(str::to_string),
            kind,
            temperature: None,
            response: response.into(),
            fail_times: 0,
        }
    }

    fn key_hash(&self) -> Option<String> {
        self.prompt_hash
            .clone()
            .or_else(|| self.prompt.as_deref().map(prompt_hash))
    }

    fn temperature_matches(&self, t: f64) -> bool {
        self.temperature.is_none_or(|s| (s - t).abs() < 1e-12)
    }

    fn rule_matches(&self, prompt: &str, kind: PromptKind) -> bool {
        self.contains.as_deref().is_none_or(|c| prompt.contains(c)) && self.kind.is_none_or(|k| k == kind)
    }
}

/// Produces a response for prompts the script does not cover.
pub trait Responder: Send + Sync {
    fn respond(&self, prompt: &str) -> Option<String>;
}

type LogprobFn = dyn Fn(&str) -> Vec<TokenLogprob> + Send + Sync;

pub struct MockProvider {
    entries: Vec<ScriptEntry>,
    by_hash: HashMap<String, Vec<usize>>,
    rules: Vec<usize>,
    fallback: Option<Arc<dyn Responder>>,
    logprobs: Option<Arc<LogprobFn>>,
    failures: Mutex<HashMap<usize, u32>>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn from_entries(entries: Vec<ScriptEntry>) -> Self {
        let mut by_hash: HashMap<String, Vec<usize>> = HashMap::new();
        let mut rules = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            match e.key_hash() {
                Some(h) => by_hash.entry(h).or_default().push(i),
                None => rules.push(i),
            }
        }
        Self {
            entries,
            by_hash,
            rules,
            fallback: None,
            logprobs: Some(Arc::new(synthetic_logprobs)),
            failures: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::from_entries(load_script(path)?))
    }

    /// Every prompt gets a well-formed synthetic response.
    pub fn synthetic() -> Self {
        Self::from_entries(Vec::new()).with_fallback(Arc::new(SyntheticResponder::default()))
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn Responder>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn with_logprobs(mut self, f: impl Fn(&str) -> Vec<TokenLogprob> + Send + Sync + 'static) -> Self {
        self.logprobs = Some(Arc::new(f));
        self
    }

    pub fn without_logprobs(mut self) -> Self {
        self.logprobs = None;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn lookup(&self, prompt: &str, temperature: f64) -> Option<usize> {
        let hash = prompt_hash(prompt);
        if let Some(idx) = self
            .by_hash
            .get(&hash)
            .and_then(|v| v.iter().copied().find(|&i| self.entries[i].temperature_matches(temperature)))
        {
            return Some(idx);
        }
        let kind = PromptKind::classify(prompt);
        self.rules.iter().copied().find(|&i| {
            let e = &self.entries[i];
            e.temperature_matches(temperature) && e.rule_matches(prompt, kind)
        })
    }
}

pub fn load_script(path: &Path) -> Result<Vec<ScriptEntry>, LlmError> {
    let file = File::open(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ScriptEntry = serde_json::from_str(&line)
            .map_err(|e| LlmError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

impl ChatProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn send(&self, req: &ChatRequest, _profile: &ProviderProfile) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = req.prompt_text();
        if let Some(idx) = self.lookup(&prompt, req.temperature) {
            let entry = &self.entries[idx];
            if entry.fail_times > 0 {
                let mut failures = self.failures.lock().expect("mock poisoned");
                let seen = failures.entry(idx).or_insert(0);
                if *seen < entry.fail_times {
                    *seen += 1;
                    return Err(LlmError::Transient(format!("scripted failure {}", *seen)));
                }
            }
            return Ok(ChatResponse::text(entry.response.clone()));
        }
        if let Some(text) = self.fallback.as_ref().and_then(|f| f.respond(&prompt)) {
            return Ok(ChatResponse::text(text));
        }
        Err(LlmError::Unscripted {
            prompt_hash: prompt_hash(&prompt),
        })
    }

    fn score_tokens(&self, text: &str, _profile: &ProviderProfile) -> Result<Vec<TokenLogprob>, LlmError> {
        let f = self.logprobs.as_ref().ok_or(LlmError::NoLogprobs)?;
        Ok(f(text))
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

/// Whitespace tokens with a logprob fixed by each token's bytes.
pub fn synthetic_logprobs(text: &str) -> Vec<TokenLogprob> {
    text.split_whitespace()
        .map(|tok| TokenLogprob {
            token: tok.to_string(),
            logprob: -(0.05 + (fnv1a(tok.as_bytes()) % 400) as f64 / 100.0),
        })
        .collect()
}

/// Answers every template shape with a deterministic, well-formed reply.
///
/// Rewrites echo the source query, labels copy the first guide label, and
/// final answers take the majority label of the in-prompt demonstrations.
#[derive(Debug, Clone)]
pub struct SyntheticResponder {
    pub zero_shot_answer: String,
}

impl Default for SyntheticResponder {
    fn default() -> Self {
        Self {
            zero_shot_answer: "unknown".into(),
        }
    }
}

fn answered_labels(text: &str) -> Vec<&str> {
    text.lines()
        .filter_map(|l| l.strip_prefix(ANSWER_MARKER))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

fn majority<'a>(labels: &[&'a str]) -> Option<&'a str> {
    let mut best: Option<(&str, usize)> = None;
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            continue;
        }
        let count = labels.iter().filter(|x| *x == l).count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((l, count));
        }
    }
    best.map(|(l, _)| l)
}

impl Responder for SyntheticResponder {
    fn respond(&self, prompt: &str) -> Option<String> {
        let answer = |a: &str| format!("{ANSWER_MARKER} {a}");
        Some(match PromptKind::classify(prompt) {
            PromptKind::Transform => {
                let body = extract_tag(prompt, "Source Task Query")
                    .or_else(|| extract_tag(prompt, "Example of Target Task Query"))?;
                format!("<Rewrote>\n<Target Task Query>\n{body}\n</Target Task Query>\n</Rewrote>")
            }
            PromptKind::Refine => {
                let body = extract_tag(prompt, "Synthesized Query")?;
                format!("<Refined Query>\n{body}\n</Refined Query>")
            }
            PromptKind::OneStep => {
                let query = extract_tag(prompt, "Source Task Query")?;
                let ans = extract_tag(prompt, "Source Task Answer")?;
                format!(
                    "<Rewrote>\n<Target Task Query>\n{query}\n</Target Task Query>\n<Target Task Answer>\n{ans}\n</Target Task Answer>\n</Rewrote>"
                )
            }
            PromptKind::Template => {
                let first = prompt
                    .split("Input Example1:\n")
                    .nth(1)
                    .and_then(|rest| rest.lines().next())
                    .unwrap_or("");
                let shape: String = first
                    .split_whitespace()
                    .take(4)
                    .map(|w| if w.chars().all(char::is_alphanumeric) { "[text]" } else { w })
                    .collect::<Vec<_>>()
                    .join(" ");
                format!("<Input Template> {shape} ... </Input Template>")
            }
            PromptKind::Label => {
                let guides = prompt.split("Please generate a response").next().unwrap_or("");
                let labels = answered_labels(guides);
                answer(labels.first().copied().unwrap_or(&self.zero_shot_answer))
            }
            PromptKind::Final => {
                let labels = answered_labels(prompt);
                answer(majority(&labels).unwrap_or(&self.zero_shot_answer))
            }
        })
    }
}

/// Wraps a live provider and appends every successful reply to a script
/// file that [`MockProvider::from_jsonl`] can replay.
pub struct RecordingProvider {
    inner: Arc<dyn ChatProvider>,
    out: Mutex<File>,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn ChatProvider>, path: &Path) -> Result<Self, LlmError> {
        let out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            out: Mutex::new(out),
        })
    }
}

impl ChatProvider for RecordingProvider {
    fn name(&self) -> &str {
        "recording"
    }

    fn send(&self, req: &ChatRequest, profile: &ProviderProfile) -> Result<ChatResponse, LlmError> {
        let resp = self.inner.send(req, profile)?;
        let entry = ScriptEntry {
            temperature: Some(req.temperature),
            ..ScriptEntry::exact(&req.prompt_text(), &resp.text)
        };
        let mut line = serde_json::to_string(&entry).expect("script entry");
        line.push('\n');
        self.out
            .lock()
            .expect("recorder poisoned")
            .write_all(line.as_bytes())
            .map_err(|e| LlmError::Config(format!("recording: {e}")))?;
        Ok(resp)
    }

    fn score_tokens(&self, text: &str, profile: &ProviderProfile) -> Result<Vec<TokenLogprob>, LlmError> {
        self.inner.score_tokens(text, profile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ProviderProfile;

    fn ask(mock: &MockProvider, prompt: &str, temperature: f64) -> Result<String, LlmError> {
        let mut profile = ProviderProfile::default();
        profile.temperature = temperature;
        mock.send(&ChatRequest::single_user(prompt, &profile), &profile)
            .map(|r| r.text)
    }

    #[test]
    fn exact_entries_beat_rules() {
        let mock = MockProvider::from_entries(vec![
            ScriptEntry::rule(None, Some("abc"), "rule"),
            ScriptEntry::exact("xx abc", "exact"),
        ]);
        assert_eq!(ask(&mock, "xx abc", 0.6).unwrap(), "exact");
        assert_eq!(ask(&mock, "yy abc", 0.6).unwrap(), "rule");
        assert!(ask(&mock, "zz", 0.6).is_err());
    }

    #[test]
    fn temperature_is_part_of_the_key() {
        let mut e = ScriptEntry::exact("P", "cold");
        e.temperature = Some(0.0);
        let mock = MockProvider::from_entries(vec![e]);
        assert_eq!(ask(&mock, "P", 0.0).unwrap(), "cold");
        assert!(matches!(ask(&mock, "P", 0.7), Err(LlmError::Unscripted { .. })));
    }

    #[test]
    fn kind_rules_use_template_wording() {
        let mock = MockProvider::from_entries(vec![ScriptEntry::rule(
            Some(PromptKind::Refine),
            None,
            "<Refined Query>\nq\n</Refined Query>",
        )]);
        assert!(ask(&mock, "Could you help me refine the synthesized query?", 0.6).is_ok());
        assert!(ask(&mock, "Task Instruction:\nx", 0.6).is_err());
    }

    #[test]
    fn synthetic_final_answer_is_majority_label() {
        let r = SyntheticResponder::default();
        let prompt = "Task Instruction:\nd\n\nInput:\na\n\nThe final answer is: 2\n\nTask Instruction:\nd\n\nInput:\nb\n\nThe final answer is: 1\n\nTask Instruction:\nd\n\nInput:\nc\n\nThe final answer is: 1\n\nTask Instruction:\nd\n\nInput:\nq";
        assert_eq!(r.respond(prompt).unwrap(), "The final answer is: 1");
        assert_eq!(r.respond("Task Instruction:\nd").unwrap(), "The final answer is: unknown");
    }

    #[test]
    fn script_roundtrips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let entries = vec![ScriptEntry::exact("A", "1"), ScriptEntry::rule(Some(PromptKind::Final), None, "2")];
        let body: String = entries
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect();
        std::fs::write(&path, body).unwrap();
        assert_eq!(load_script(&path).unwrap(), entries);
    }

    #[test]
    fn recorder_output_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.jsonl");
        let live = Arc::new(MockProvider::synthetic());
        let rec = RecordingProvider::new(live, &path).unwrap();
        let profile = ProviderProfile::default();
        let req = ChatRequest::single_user("Task Instruction:\nq", &profile);
        let first = rec.send(&req, &profile).unwrap().text;
        let replay = MockProvider::from_jsonl(&path).unwrap();
        assert_eq!(replay.send(&req, &profile).unwrap().text, first);
    }
}
