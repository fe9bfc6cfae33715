//! Client for chat-style text-generation services, plus the judge-output
//! parser and a chat-backed strategist.
//!
//! The wire protocol is the common one: POST a JSON body with `model`,
//! `temperature` and `messages`; read the assistant text back out of the
//! response at a configurable JSON path.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Strategy, Token};
use crate::policy::{BackendError, Decoding, PolicyBackend, PolicyContext, PolicyGradient};
use crate::prompts::{strategist_vars, TemplateSet};

/// One message in a chat exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: &'a [ChatMessage],
}

/// Blocking client with retry/backoff for a chat completion endpoint.
#[derive(Debug, Clone)]
pub struct ChatServiceClient {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Dotted path to the assistant text within the response JSON.
    pub response_path: String,
    /// Base backoff delay; tests shrink this so retries do not stall the suite.
    pub backoff_base: Duration,
    /// Sent as a bearer token when present.
    pub api_key: Option<String>,
}

impl ChatServiceClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ChatServiceClient {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 0.7,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            response_path: "choices.0.message.content".into(),
            backoff_base: Duration::from_millis(500),
            api_key: None,
        }
    }

    pub fn with_api_key(mut self, api_key: Option<String>) -> Self {
        self.api_key = api_key;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn with_backoff_base(mut self, backoff_base: Duration) -> Self {
        self.backoff_base = backoff_base;
        self
    }

    fn validate(&self) -> Result<(), BackendError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Extract the value at a dotted path like `choices.0.message.content`.
fn walk_response_path<'v>(root: &'v serde_json::Value, path: &str) -> Option<&'v serde_json::Value> {
    let mut node = root;
    for segment in path.split('.') {
        node = match segment.parse::<usize>() {
            Ok(index) => node.get(index)?,
            Err(_) => node.get(segment)?,
        };
    }
    Some(node)
}

/// Send one chat completion request, retrying transport failures and 5xx
/// responses with exponential backoff (base · 2^attempt, ±20% jitter).
pub fn chat_complete(
    client: &ChatServiceClient,
    messages: &[ChatMessage],
) -> Result<String, BackendError> {
    client.validate()?;
    if messages.is_empty() {
        return Err(BackendError::Unsupported("chat_complete requires at least one message"));
    }
    let http = reqwest::blocking::Client::builder()
        .timeout(client.timeout)
        .build()
        .map_err(|e| BackendError::Transport { attempts: 0, reason: e.to_string() })?;
    let body = ChatRequest {
        model: &client.model,
        temperature: client.temperature,
        messages,
    };

    let mut last_reason = String::new();
    for attempt in 0..=client.max_retries {
        if attempt > 0 {
            let factor = 1.0 + rand::thread_rng().gen_range(-0.2..=0.2);
            let delay = client.backoff_base.as_secs_f64() * f64::from(1u32 << (attempt - 1)) * factor;
            std::thread::sleep(Duration::from_secs_f64(delay.max(0.0)));
        }
        let mut request = http.post(&client.endpoint).json(&body);
        if let Some(key) = &client.api_key {
            request = request.bearer_auth(key);
        }
        let sent = request.send();
        let response = match sent {
            Ok(r) => r,
            Err(e) => {
                last_reason = e.to_string();
                continue;
            }
        };
        let status = response.status();
        let text = response.text().unwrap_or_default();
        if status.is_server_error() {
            last_reason = format!("status {status}: {text}");
            continue;
        }
        if !status.is_success() {
            return Err(BackendError::Service { status: status.as_u16(), body: text });
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Transport {
                attempts: attempt + 1,
                reason: format!("response body is not JSON: {e}"),
            })?;
        let content = walk_response_path(&value, &client.response_path)
            .and_then(|v| v.as_str())
            .ok_or_else(|| BackendError::ResponsePath { path: client.response_path.clone() })?;
        return Ok(content.to_string());
    }
    Err(BackendError::Transport { attempts: client.max_retries + 1, reason: last_reason })
}

/// Judge output: which strategist turns were critical, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessRewardLabel {
    pub indexes: Vec<usize>,
    pub reasoning: String,
}

impl ProcessRewardLabel {
    /// Build a label from raw judge output: sorts and dedups the indexes,
    /// then enforces 1-based bounds against the strategist turn count.
    pub fn new(
        mut indexes: Vec<usize>,
        reasoning: impl Into<String>,
        strategist_turns: usize,
    ) -> Result<Self, PrmParseError> {
        indexes.sort_unstable();
        indexes.dedup();
        for &index in &indexes {
            if index < 1 || index > strategist_turns {
                return Err(PrmParseError::OutOfRange { index, max: strategist_turns });
            }
        }
        Ok(ProcessRewardLabel { indexes, reasoning: reasoning.into() })
    }

    pub fn is_critical(&self, one_based_index: usize) -> bool {
        self.indexes.binary_search(&one_based_index).is_ok()
    }
}

/// Why a judge response could not be turned into a [`ProcessRewardLabel`].
#[derive(Debug, Error)]
pub enum PrmParseError {
    #[error("no JSON object found in judge output: {text:?}")]
    NoJson { text: String },
    #[error("judge JSON is malformed: {reason} in {text:?}")]
    Malformed { reason: String, text: String },
    #[error("judge JSON is missing required field {field:?}: {text:?}")]
    MissingField { field: &'static str, text: String },
    #[error("judge field {field:?} has the wrong type: {text:?}")]
    WrongType { field: &'static str, text: String },
    #[error("index {index} out of range: labels are 1-based with at most {max}")]
    OutOfRange { index: usize, max: usize },
}

/// Find the first balanced top-level `{...}` block in free text.
fn first_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=start + offset]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parse judge output into a label. Judges often wrap their JSON in prose, so
/// this extracts the first balanced-brace object before deserializing.
pub fn parse_prm_response(
    text: &str,
    strategist_turns: usize,
) -> Result<ProcessRewardLabel, PrmParseError> {
    let snippet = first_json_object(text).ok_or_else(|| PrmParseError::NoJson {
        text: text.to_string(),
    })?;
    let value: serde_json::Value = serde_json::from_str(snippet).map_err(|e| {
        PrmParseError::Malformed { reason: e.to_string(), text: snippet.to_string() }
    })?;
    let object = value.as_object().ok_or_else(|| PrmParseError::Malformed {
        reason: "top-level JSON is not an object".into(),
        text: snippet.to_string(),
    })?;
    let raw_indexes = object
        .get("indexes")
        .ok_or(PrmParseError::MissingField { field: "indexes", text: snippet.to_string() })?;
    let reasoning = object
        .get("reasoning")
        .ok_or(PrmParseError::MissingField { field: "reasoning", text: snippet.to_string() })?
        .as_str()
        .ok_or(PrmParseError::WrongType { field: "reasoning", text: snippet.to_string() })?;
    let indexes = raw_indexes
        .as_array()
        .ok_or(PrmParseError::WrongType { field: "indexes", text: snippet.to_string() })?
        .iter()
        .map(|v| {
            v.as_u64()
                .map(|n| n as usize)
                .ok_or(PrmParseError::WrongType { field: "indexes", text: snippet.to_string() })
        })
        .collect::<Result<Vec<usize>, PrmParseError>>()?;
    ProcessRewardLabel::new(indexes, reasoning, strategist_turns)
}

/// Strategist backed by a chat service. Sampling renders the strategist
/// template and sends it; the service has no exposed parameters, so gradient
/// updates and exact log-probabilities are unsupported.
pub struct ChatStrategist {
    client: ChatServiceClient,
    templates: TemplateSet,
}

impl ChatStrategist {
    pub fn new(client: ChatServiceClient, templates: TemplateSet) -> Self {
        ChatStrategist { client, templates }
    }

    /// Pull the strategy line out of a free-form completion: the first line
    /// carrying a `Strategy:`/`Thought:` prefix, else the first non-empty line.
    fn extract_strategy_line(text: &str) -> String {
        for line in text.lines() {
            let trimmed = line.trim();
            for prefix in ["Strategy:", "Thought:"] {
                if let Some(rest) = trimmed.strip_prefix(prefix) {
                    return rest.trim().to_string();
                }
            }
        }
        text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").to_string()
    }
}

impl PolicyBackend for ChatStrategist {
    fn sample(
        &self,
        context: &PolicyContext,
        decoding: Decoding,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<Strategy, BackendError> {
        let temperature = match decoding {
            Decoding::Greedy => 0.0,
            Decoding::Sample { temperature } => {
                if !(temperature > 0.0) {
                    return Err(BackendError::BadTemperature(temperature));
                }
                temperature
            }
        };
        let client = self.client.clone().with_temperature(temperature);
        let prompt = self.templates.strategist.render(&strategist_vars(context));
        let messages = [
            ChatMessage::system(prompt),
            ChatMessage::user("Reply with your strategy for the current turn."),
        ];
        let text = chat_complete(&client, &messages)?;
        let line = Self::extract_strategy_line(&text);
        Ok(Strategy {
            tokens: vec![Token::Text(line.clone())],
            token_logprobs: None,
            rendered: line,
        })
    }

    fn logprobs(&self, _context: &PolicyContext, _tokens: &[Token]) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Unsupported("chat services do not expose token log-probabilities"))
    }

    fn apply_gradient(&self, _gradient: &PolicyGradient, _step_size: f64) -> Result<String, BackendError> {
        Err(BackendError::Unsupported("chat strategist parameters live server-side; train the toy policy instead"))
    }

    fn version(&self) -> String {
        format!("chat:{}", self.model_tag())
    }

    fn param_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.client.endpoint.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.client.model.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

impl ChatStrategist {
    fn model_tag(&self) -> &str {
        &self.client.model
    }
}
