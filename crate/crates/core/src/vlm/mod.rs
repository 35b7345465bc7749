//! Generation backends: free-text generation with image attachments and a
//! yes-token relevance probability.
//!
//! Three realizations share [`GenerationBackend`]: [`MockBackend`] (a pure
//! function of request and seed), [`OpenAiBackend`] (chat-completions over
//! HTTP) and [`CachedBackend`], which fronts either with a content-addressed
//! JSONL cache.

mod cache;
mod mock;
mod openai;
mod throttle;

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheEntry, CachedBackend, CachedValue, ResponseCache};
pub use mock::MockBackend;
pub use openai::{yes_probability, OpenAiBackend, OpenAiConfig, YesMode};
pub use throttle::Throttle;

/// Upper bound on images attached to one request.
pub const MAX_IMAGES_PER_REQUEST: usize = 16;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("invalid request: {0}")]
    Input(String),
    #[error("unreadable image `{reference}`: {source}")]
    UnreadableImage {
        reference: String,
        #[source]
        source: std::io::Error,
    },
    #[error("backend error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Backend { status: Option<u16>, message: String },
    #[error("backend capability missing: {0}")]
    Capability(String),
    #[error("cache: {0}")]
    Cache(String),
}

impl VlmError {
    /// Errors caused by the caller's inputs rather than the backend.
    pub fn is_input(&self) -> bool {
        matches!(self, VlmError::Input(_) | VlmError::UnreadableImage { .. })
    }
}

pub type Result<T> = std::result::Result<T, VlmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestKind {
    FreeText,
    Relevance,
}

/// One backend call. Field order is the canonical serialization used for
/// cache keys; do not reorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub kind: RequestKind,
    pub prompt: String,
    pub images: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl GenerationRequest {
    pub const DEFAULT_TEMPERATURE: f64 = 1.0;
    pub const DEFAULT_MAX_TOKENS: u32 = 256;

    pub fn text(prompt: impl Into<String>, images: Vec<String>) -> Self {
        Self {
            kind: RequestKind::FreeText,
            prompt: prompt.into(),
            images,
            temperature: Self::DEFAULT_TEMPERATURE,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
        }
    }

    pub fn relevance(prompt: impl Into<String>, image: impl Into<String>) -> Self {
        Self {
            kind: RequestKind::Relevance,
            prompt: prompt.into(),
            images: vec![image.into()],
            temperature: Self::DEFAULT_TEMPERATURE,
            max_tokens: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(VlmError::Input("empty prompt".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(VlmError::Input(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.images.len() > MAX_IMAGES_PER_REQUEST {
            return Err(VlmError::Input(format!(
                "{} images exceed the per-request bound of {MAX_IMAGES_PER_REQUEST}",
                self.images.len()
            )));
        }
        if self.kind == RequestKind::Relevance && self.images.len() != 1 {
            return Err(VlmError::Input("relevance requests carry exactly one image".into()));
        }
        if self.max_tokens == 0 {
            return Err(VlmError::Input("max_tokens must be at least 1".into()));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

pub trait GenerationBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn model_id(&self) -> &str;
    /// Non-empty generated text.
    fn generate(&self, request: &GenerationRequest) -> Result<String>;
    /// Probability in `[0, 1]` that the answer is "yes".
    fn relevance(&self, request: &GenerationRequest) -> Result<f64>;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for std::sync::Arc<B> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        (**self).generate(request)
    }
    fn relevance(&self, request: &GenerationRequest) -> Result<f64> {
        (**self).relevance(request)
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for Box<B> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        (**self).generate(request)
    }
    fn relevance(&self, request: &GenerationRequest) -> Result<f64> {
        (**self).relevance(request)
    }
}

/// Timestamp source for cache entries and generated contexts. Mock runs use
/// a fixed clock so that their outputs are byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    Fixed(u64),
}

impl Clock {
    pub fn now(&self) -> u64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            Clock::Fixed(t) => *t,
        }
    }
}
