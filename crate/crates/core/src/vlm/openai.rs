//! OpenAI-compatible `/chat/completions` client.
//!
//! Images are sent inline as base64 data URLs (remote `http(s)://` references
//! pass through untouched). Relevance requests ask for one output token with
//! top-k log-probabilities and read the yes/no mass off the first position.

use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::throttle::Throttle;
use super::{GenerationBackend, GenerationRequest, Result, VlmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesMode {
    /// `p(yes) / (p(yes) + p(no))`
    #[default]
    Normalized,
    /// `p(yes)` as returned.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiConfig {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub top_logprobs: u8,
    pub max_in_flight: usize,
    pub rate_per_sec: Option<f64>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub yes_mode: YesMode,
    /// Directory that relative image references resolve against.
    pub image_root: Option<PathBuf>,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "Qwen/Qwen2-VL-7B-Instruct".into(),
            api_key_env: "FICHAD_API_KEY".into(),
            top_logprobs: 5,
            max_in_flight: 4,
            rate_per_sec: None,
            timeout_secs: 120,
            max_attempts: 3,
            backoff_ms: 500,
            yes_mode: YesMode::Normalized,
            image_root: None,
        }
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    throttle: Throttle,
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

/// Result of a single HTTP exchange.
enum Attempt {
    Done(Value),
    Retry { status: Option<u16>, message: String },
    Fatal { status: Option<u16>, message: String },
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self> {
        if config.endpoint.trim().is_empty() {
            return Err(VlmError::Input("wire backend needs an endpoint URL".into()));
        }
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self::with_key(config, api_key))
    }

    pub fn with_key(config: OpenAiConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let throttle = Throttle::new(config.max_in_flight, config.rate_per_sec);
        Self {
            config,
            api_key,
            agent,
            throttle,
        }
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn image_url(&self, reference: &str) -> Result<String> {
        if reference.starts_with("http://") || reference.starts_with("https://") || reference.starts_with("data:") {
            return Ok(reference.to_string());
        }
        let path = match &self.config.image_root {
            Some(root) if Path::new(reference).is_relative() => root.join(reference),
            _ => PathBuf::from(reference),
        };
        let bytes = std::fs::read(&path).map_err(|source| VlmError::UnreadableImage {
            reference: reference.to_string(),
            source,
        })?;
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => "image/png",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            Some("bmp") => "image/bmp",
            _ => "image/jpeg",
        };
        Ok(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }

    fn body(&self, req: &GenerationRequest, with_logprobs: bool) -> Result<Value> {
        let mut content = vec![json!({"type": "text", "text": req.prompt})];
        for img in &req.images {
            content.push(json!({"type": "image_url", "image_url": {"url": self.image_url(img)?}}));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if with_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.config.top_logprobs);
        }
        Ok(body)
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let _permit = self.throttle.acquire();
        let mut call = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match call.send(body.to_string().as_bytes()) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    status: None,
                    message: e.to_string(),
                }
            }
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        match status {
            200..=299 => match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fatal {
                    status: Some(status),
                    message: format!("malformed response body: {e}"),
                },
            },
            408 | 429 | 500..=599 => Attempt::Retry {
                status: Some(status),
                message: snippet(&text),
            },
            _ => Attempt::Fatal {
                status: Some(status),
                message: snippet(&text),
            },
        }
    }

    fn call(&self, body: &Value) -> Result<Value> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = (None, String::new());
        for i in 0..attempts {
            if i > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (i - 1)));
            }
            match self.attempt(body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal { status, message } => return Err(VlmError::Backend { status, message }),
                Attempt::Retry { status, message } => {
                    log::warn!("transient backend failure (attempt {}/{attempts}): {message}", i + 1);
                    last = (status, message);
                }
            }
        }
        Err(VlmError::Backend {
            status: last.0,
            message: format!("retries exhausted after {attempts} attempts: {}", last.1),
        })
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(300).collect()
}

/// Yes-probability from the first position's top log-probabilities.
/// Tokens are matched case-insensitively after trimming whitespace and
/// tokenizer word-boundary markers. Absent "yes" gives 0.
pub fn yes_probability(top: &[(String, f64)], mode: YesMode) -> f64 {
    let norm = |t: &str| {
        t.trim()
            .trim_start_matches(['Ġ', '▁'])
            .trim_end_matches(['.', ',', '!'])
            .to_lowercase()
    };
    let mut yes = None::<f64>;
    let mut no = 0.0;
    for (tok, lp) in top {
        match norm(tok).as_str() {
            "yes" => *yes.get_or_insert(0.0) += lp.exp(),
            "no" => no += lp.exp(),
            _ => {}
        }
    }
    let Some(yes) = yes else { return 0.0 };
    let p = match mode {
        YesMode::Raw => yes,
        YesMode::Normalized => yes / (yes + no),
    };
    p.clamp(0.0, 1.0)
}

fn top_logprobs(v: &Value) -> Option<Vec<(String, f64)>> {
    let first = v.pointer("/choices/0/logprobs/content/0")?;
    let out = first
        .get("top_logprobs")?
        .as_array()?
        .iter()
        .filter_map(|e| Some((e.get("token")?.as_str()?.to_string(), e.get("logprob")?.as_f64()?)))
        .collect();
    Some(out)
}

impl GenerationBackend for OpenAiBackend {
    fn backend_id(&self) -> &str {
        "openai-compatible"
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        req.validate()?;
        let body = self.body(req, false)?;
        let v = self.call(&body)?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| VlmError::Backend {
                status: None,
                message: "response has no choices[0].message.content".into(),
            })?
            .trim()
            .to_string();
        if text.is_empty() {
            return Err(VlmError::Backend {
                status: None,
                message: "backend returned empty text".into(),
            });
        }
        Ok(text)
    }

    fn relevance(&self, req: &GenerationRequest) -> Result<f64> {
        req.validate()?;
        let body = self.body(req, true)?;
        let v = self.call(&body)?;
        let top = top_logprobs(&v).ok_or_else(|| {
            VlmError::Capability(
                "endpoint returned no log-probabilities; serve the model with logprobs enabled \
                 or use a backend that supports them"
                    .into(),
            )
        })?;
        Ok(yes_probability(&top, self.config.yes_mode))
    }
}
