//! Provider-agnostic chat completion with retries, rate limiting and a
//! JSON Lines transcript.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use qnl_core::prompt::{build_negative_prompt, build_reflection_prompt, PromptBundle, PromptTemplate};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::digest::json_digest;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("conversation must end with a user turn")]
    NotUserTurn,
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {0} attempt(s)")]
    RateLimited(u32),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error("unexpected provider response: {0}")]
    BadResponse(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("transcript: {0}")]
    Transcript(std::io::Error),
}

impl LlmError {
    fn retryable(&self) -> bool {
        matches!(self, LlmError::RateLimited(_) | LlmError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: ChatRole,
    pub content: String,
}

impl ChatTurn {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// Stable digest of a conversation, used as the mock fixture key.
pub fn history_digest(history: &[ChatTurn]) -> String {
    json_digest(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    HttpOpenaiStyle,
    HttpGeminiStyle,
    LocalHttp,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub provider: ProviderKind,
    pub model_id: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub base_url: Option<String>,
    /// Response table for the mock provider.
    pub fixture: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub max_retries: u32,
    pub rate_limit_per_s: f64,
    pub timeout_ms: u64,
    pub backoff_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            model_id: "mock".into(),
            api_key_env: "QNL_API_KEY".into(),
            base_url: None,
            fixture: None,
            temperature: 0.0,
            max_tokens: None,
            max_retries: 3,
            rate_limit_per_s: 2.0,
            timeout_ms: 60_000,
            backoff_ms: 500,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.temperature < 0.0 {
            return Err(LlmError::Config("temperature must be >= 0".into()));
        }
        if self.provider == ProviderKind::Mock && self.fixture.is_none() {
            return Err(LlmError::Config("the mock provider needs a fixture path".into()));
        }
        if self.model_id.is_empty() {
            return Err(LlmError::Config("model_id must not be empty".into()));
        }
        Ok(())
    }
}

/// One request/response exchange with a provider.
pub trait ChatBackend: Send + Sync {
    fn send(&self, history: &[ChatTurn], cfg: &ProviderConfig) -> Result<String, LlmError>;
}

/// Fixture-driven provider: history digest to canned reply. An unknown
/// single-turn history gets a deterministic echo tagged `[mock]`; an unknown
/// follow-up repeats the last assistant answer.
#[derive(Debug, Default, Clone)]
pub struct MockBackend {
    responses: BTreeMap<String, String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct MockFixture {
    pub responses: BTreeMap<String, String>,
}

impl MockBackend {
    pub fn new(responses: BTreeMap<String, String>) -> Self {
        Self { responses }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        let fixture: MockFixture =
            serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(fixture.responses))
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, history: &[ChatTurn], _cfg: &ProviderConfig) -> Result<String, LlmError> {
        let digest = history_digest(history);
        if let Some(r) = self.responses.get(&digest) {
            return Ok(r.clone());
        }
        // A follow-up turn keeps the previous answer unchanged.
        if let Some(prev) = history.iter().rev().find(|t| t.role == ChatRole::Assistant) {
            return Ok(prev.content.clone());
        }
        let last = history
            .last()
            .and_then(|t| t.content.lines().rev().find(|l| !l.trim().is_empty()))
            .unwrap_or("")
            .trim();
        let last = last.replace(['.', '!'], "");
        Ok(format!("[mock {}] {}?", &digest[..12], last.trim_end()))
    }
}

fn http_agent(cfg: &ProviderConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .new_agent()
}

fn classify_status(status: u16, body: &str) -> Option<LlmError> {
    match status {
        200..=299 => None,
        401 | 403 => Some(LlmError::Auth(format!("HTTP {status}"))),
        429 => Some(LlmError::RateLimited(1)),
        _ => Some(LlmError::Transport {
            attempts: 1,
            message: format!("HTTP {status}: {}", body.chars().take(200).collect::<String>()),
        }),
    }
}

fn post_json(agent: &ureq::Agent, url: &str, headers: &[(&str, String)], body: &Value) -> Result<Value, LlmError> {
    let mut req = agent.post(url);
    for (k, v) in headers {
        req = req.header(*k, v);
    }
    let mut resp = req.send_json(body).map_err(|e| LlmError::Transport {
        attempts: 1,
        message: e.to_string(),
    })?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| LlmError::Transport {
        attempts: 1,
        message: e.to_string(),
    })?;
    if let Some(err) = classify_status(status, &text) {
        return Err(err);
    }
    serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(e.to_string()))
}

fn api_key(cfg: &ProviderConfig, required: bool) -> Result<Option<String>, LlmError> {
    match std::env::var(&cfg.api_key_env) {
        Ok(k) if !k.is_empty() => Ok(Some(k)),
        _ if required => Err(LlmError::Auth(format!(
            "environment variable {} is not set",
            cfg.api_key_env
        ))),
        _ => Ok(None),
    }
}

/// `POST {base}/chat/completions` with a `messages` array. Also used for
/// local servers that speak the same format, where the key is optional.
pub struct OpenAiStyleBackend {
    agent: ureq::Agent,
    key_required: bool,
}

impl OpenAiStyleBackend {
    pub fn new(cfg: &ProviderConfig, key_required: bool) -> Self {
        Self {
            agent: http_agent(cfg),
            key_required,
        }
    }
}

pub fn openai_request(history: &[ChatTurn], cfg: &ProviderConfig) -> Value {
    let mut body = json!({
        "model": cfg.model_id,
        "messages": history,
        "temperature": cfg.temperature,
    });
    if let Some(m) = cfg.max_tokens {
        body["max_tokens"] = json!(m);
    }
    body
}

impl ChatBackend for OpenAiStyleBackend {
    fn send(&self, history: &[ChatTurn], cfg: &ProviderConfig) -> Result<String, LlmError> {
        let default_base = if self.key_required {
            "https://api.openai.com/v1"
        } else {
            "http://127.0.0.1:8080/v1"
        };
        let base = cfg.base_url.as_deref().unwrap_or(default_base).trim_end_matches('/');
        let mut headers = Vec::new();
        if let Some(key) = api_key(cfg, self.key_required)? {
            headers.push(("Authorization", format!("Bearer {key}")));
        }
        let v = post_json(
            &self.agent,
            &format!("{base}/chat/completions"),
            &headers,
            &openai_request(history, cfg),
        )?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
    }
}

/// `POST {base}/v1beta/models/{model}:generateContent`.
pub struct GeminiStyleBackend {
    agent: ureq::Agent,
}

impl GeminiStyleBackend {
    pub fn new(cfg: &ProviderConfig) -> Self {
        Self { agent: http_agent(cfg) }
    }
}

pub fn gemini_request(history: &[ChatTurn], cfg: &ProviderConfig) -> Value {
    let system: Vec<&str> = history
        .iter()
        .filter(|t| t.role == ChatRole::System)
        .map(|t| t.content.as_str())
        .collect();
    let contents: Vec<Value> = history
        .iter()
        .filter(|t| t.role != ChatRole::System)
        .map(|t| {
            let role = if t.role == ChatRole::Assistant { "model" } else { "user" };
            json!({ "role": role, "parts": [{ "text": t.content }] })
        })
        .collect();
    let mut generation = json!({ "temperature": cfg.temperature });
    if let Some(m) = cfg.max_tokens {
        generation["maxOutputTokens"] = json!(m);
    }
    let mut body = json!({ "contents": contents, "generationConfig": generation });
    if !system.is_empty() {
        body["systemInstruction"] = json!({ "parts": [{ "text": system.join("\n\n") }] });
    }
    body
}

impl ChatBackend for GeminiStyleBackend {
    fn send(&self, history: &[ChatTurn], cfg: &ProviderConfig) -> Result<String, LlmError> {
        let base = cfg
            .base_url
            .as_deref()
            .unwrap_or("https://generativelanguage.googleapis.com")
            .trim_end_matches('/');
        let key = api_key(cfg, true)?.unwrap_or_default();
        let url = format!("{base}/v1beta/models/{}:generateContent", cfg.model_id);
        let v = post_json(
            &self.agent,
            &url,
            &[("x-goog-api-key", key)],
            &gemini_request(history, cfg),
        )?;
        let parts = v["candidates"][0]["content"]["parts"]
            .as_array()
            .ok_or_else(|| LlmError::BadResponse("missing candidates[0].content.parts".into()))?;
        Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""))
    }
}

pub fn backend_for(cfg: &ProviderConfig) -> Result<Box<dyn ChatBackend>, LlmError> {
    cfg.validate()?;
    Ok(match cfg.provider {
        ProviderKind::Mock => Box::new(MockBackend::from_file(cfg.fixture.as_deref().expect("validated"))?),
        ProviderKind::HttpOpenaiStyle => Box::new(OpenAiStyleBackend::new(cfg, true)),
        ProviderKind::LocalHttp => Box::new(OpenAiStyleBackend::new(cfg, false)),
        ProviderKind::HttpGeminiStyle => Box::new(GeminiStyleBackend::new(cfg)),
    })
}

#[derive(Debug, Serialize)]
struct TranscriptEntry<'a> {
    timestamp: String,
    digest: String,
    provider: ProviderKind,
    model_id: &'a str,
    attempts: u32,
    request: &'a [ChatTurn],
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// A sentence-limited reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    /// Several sentences and none ended in `?`; `text` is the raw reply.
    pub flagged: bool,
}

/// Keeps the first sentence ending in `?` when the reply has several
/// sentences. Without such a sentence the trimmed reply is kept and flagged.
pub fn one_sentence(reply: &str) -> Reply {
    let reply = reply.trim();
    let mut sentences = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = reply.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let at_break = chars.get(i + 1).is_none_or(|&(_, n)| n.is_whitespace());
            if at_break {
                let end = pos + c.len_utf8();
                let s = reply[start..end].trim();
                if !s.is_empty() {
                    sentences.push(s);
                }
                start = end;
            }
        }
    }
    if !reply[start..].trim().is_empty() {
        sentences.push(reply[start..].trim());
    }
    if sentences.len() <= 1 {
        return Reply {
            text: reply.to_string(),
            flagged: false,
        };
    }
    match sentences.iter().find(|s| s.ends_with('?')) {
        Some(s) => Reply {
            text: s.to_string(),
            flagged: false,
        },
        None => Reply {
            text: reply.to_string(),
            flagged: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Translation {
    pub first: Reply,
    pub final_: Reply,
}

pub struct Gateway {
    cfg: ProviderConfig,
    backend: Box<dyn ChatBackend>,
    transcript: Option<Mutex<File>>,
    next_slot: Mutex<Instant>,
    calls: Mutex<u64>,
}

impl Gateway {
    pub fn new(cfg: ProviderConfig, backend: Box<dyn ChatBackend>) -> Self {
        Self {
            cfg,
            backend,
            transcript: None,
            next_slot: Mutex::new(Instant::now()),
            calls: Mutex::new(0),
        }
    }

    pub fn from_config(cfg: ProviderConfig) -> Result<Self, LlmError> {
        let backend = backend_for(&cfg)?;
        Ok(Self::new(cfg, backend))
    }

    /// Appends every call to the JSON Lines file at `path`.
    pub fn with_transcript(mut self, path: &Path) -> Result<Self, LlmError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(LlmError::Transcript)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(LlmError::Transcript)?;
        self.transcript = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    /// Number of provider requests sent, retries included.
    pub fn requests_sent(&self) -> u64 {
        *self.calls.lock().expect("counter lock")
    }

    fn throttle(&self) {
        if self.cfg.rate_limit_per_s <= 0.0 || self.cfg.provider == ProviderKind::Mock {
            return;
        }
        let interval = Duration::from_secs_f64(1.0 / self.cfg.rate_limit_per_s);
        let slot = {
            let mut next = self.next_slot.lock().expect("limiter lock");
            let slot = (*next).max(Instant::now());
            *next = slot + interval;
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }

    fn log(&self, history: &[ChatTurn], attempts: u32, result: &Result<String, LlmError>) -> Result<(), LlmError> {
        let Some(file) = &self.transcript else {
            return Ok(());
        };
        let entry = TranscriptEntry {
            timestamp: chrono::Utc::now().to_rfc3339(),
            digest: history_digest(history),
            provider: self.cfg.provider,
            model_id: &self.cfg.model_id,
            attempts,
            request: history,
            response: result.as_ref().ok().map(String::as_str),
            error: result.as_ref().err().map(ToString::to_string),
        };
        let mut line = serde_json::to_string(&entry).expect("transcript entry serializes");
        line.push('\n');
        let mut f = file.lock().expect("transcript lock");
        f.write_all(line.as_bytes()).map_err(LlmError::Transcript)
    }

    /// Sends `history` and returns the trimmed assistant reply.
    pub fn complete(&self, history: &[ChatTurn]) -> Result<String, LlmError> {
        match history.last() {
            Some(t) if t.role == ChatRole::User => {}
            _ => return Err(LlmError::NotUserTurn),
        }
        if history
            .iter()
            .any(|t| t.role != ChatRole::System && t.content.trim().is_empty())
        {
            return Err(LlmError::EmptyInput("turn content"));
        }
        let mut attempts = 0;
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let result = loop {
            attempts += 1;
            self.throttle();
            *self.calls.lock().expect("counter lock") += 1;
            match self.backend.send(history, &self.cfg) {
                Ok(text) if text.trim().is_empty() => break Err(LlmError::EmptyCompletion),
                Ok(text) => break Ok(text.trim().to_string()),
                Err(e) if e.retryable() && attempts <= self.cfg.max_retries => {
                    log::warn!("provider attempt {attempts} failed: {e}");
                    thread::sleep(delay);
                    delay *= 2;
                }
                Err(LlmError::RateLimited(_)) => break Err(LlmError::RateLimited(attempts)),
                Err(LlmError::Transport { message, .. }) => break Err(LlmError::Transport { attempts, message }),
                Err(e) => break Err(e),
            }
        };
        self.log(history, attempts, &result)?;
        result
    }

    /// Sends the translation prompt and, when `reflect` is set, the
    /// reflection instruction in the same conversation.
    pub fn translate_with_reflection(&self, bundle: &PromptBundle, reflect: bool) -> Result<Translation, LlmError> {
        let mut history = vec![ChatTurn::user(bundle.rendered.clone())];
        let raw_first = self.complete(&history)?;
        let first = one_sentence(&raw_first);
        if !reflect {
            return Ok(Translation {
                final_: first.clone(),
                first,
            });
        }
        let instruction = build_reflection_prompt(bundle, &raw_first).map_err(|_| LlmError::EmptyCompletion)?;
        history.push(ChatTurn::assistant(raw_first));
        history.push(ChatTurn::user(instruction));
        let final_ = one_sentence(&self.complete(&history)?);
        Ok(Translation { first, final_ })
    }

    /// Asks for a similar question with a different meaning.
    pub fn generate_negative(
        &self,
        query_labeled: &str,
        translation: &str,
        template: &PromptTemplate,
    ) -> Result<Reply, LlmError> {
        if translation.trim().is_empty() {
            return Err(LlmError::EmptyInput("translation"));
        }
        let prompt =
            build_negative_prompt(query_labeled, translation, template).map_err(|_| LlmError::EmptyInput("query"))?;
        Ok(one_sentence(&self.complete(&[ChatTurn::user(prompt)])?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        seen: AtomicU32,
    }

    impl ChatBackend for Flaky {
        fn send(&self, _h: &[ChatTurn], _c: &ProviderConfig) -> Result<String, LlmError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(LlmError::RateLimited(1))
            } else {
                Ok("  ok  ".into())
            }
        }
    }

    fn fast() -> ProviderConfig {
        ProviderConfig {
            rate_limit_per_s: 0.0,
            backoff_ms: 0,
            max_retries: 2,
            fixture: Some("unused".into()),
            ..ProviderConfig::default()
        }
    }

    #[test]
    fn retries_are_bounded() {
        let g = Gateway::new(
            fast(),
            Box::new(Flaky {
                failures: 2,
                seen: AtomicU32::new(0),
            }),
        );
        assert_eq!(g.complete(&[ChatTurn::user("x")]).unwrap(), "ok");
        assert_eq!(g.requests_sent(), 3);
        let g = Gateway::new(
            fast(),
            Box::new(Flaky {
                failures: 10,
                seen: AtomicU32::new(0),
            }),
        );
        assert!(matches!(
            g.complete(&[ChatTurn::user("x")]),
            Err(LlmError::RateLimited(3))
        ));
        assert_eq!(g.requests_sent(), 3);
    }

    #[test]
    fn history_must_end_with_user() {
        let g = Gateway::new(fast(), Box::new(MockBackend::default()));
        let h = [ChatTurn::user("q"), ChatTurn::assistant("a")];
        assert!(matches!(g.complete(&h), Err(LlmError::NotUserTurn)));
    }

    #[test]
    fn mock_fallback_is_tagged_and_stable() {
        let g = Gateway::new(fast(), Box::new(MockBackend::default()));
        let a = g
            .complete(&[ChatTurn::user("line one\nselect ?x { ?x [p] [o] }")])
            .unwrap();
        assert!(a.starts_with("[mock "));
        assert!(a.ends_with("select ?x { ?x [p] [o] }?"));
        assert_eq!(
            a,
            g.complete(&[ChatTurn::user("line one\nselect ?x { ?x [p] [o] }")])
                .unwrap()
        );
    }

    #[test]
    fn sentence_extraction() {
        assert_eq!(one_sentence(" How many? ").text, "How many?");
        let r = one_sentence("Sure. How many victories are there? Hope this helps.");
        assert_eq!(r.text, "How many victories are there?");
        assert!(!r.flagged);
        let r = one_sentence("First. Second.");
        assert!(r.flagged);
        assert_eq!(r.text, "First. Second.");
        assert!(!one_sentence("Who won in 1919?").flagged);
    }

    #[test]
    fn mock_requires_fixture() {
        let cfg = ProviderConfig::default();
        assert!(matches!(cfg.validate(), Err(LlmError::Config(_))));
    }

    #[test]
    fn gemini_body_maps_roles() {
        let h = [ChatTurn::user("P"), ChatTurn::assistant("A"), ChatTurn::user("R")];
        let b = gemini_request(&h, &ProviderConfig::default());
        assert_eq!(b["contents"][1]["role"], "model");
        assert_eq!(b["contents"][2]["parts"][0]["text"], "R");
    }
}
