use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use super::{GenerationBackend, GenerationRequest, Result};

const CONNECTORS: &[&str] = &[
    "is shown together with",
    "appears alongside",
    "is closely associated with",
    "is depicted next to",
    "shares the scene with",
];

const SETTINGS: &[&str] = &[
    "in a detailed scene",
    "with vivid colors",
    "in a historic setting",
    "under natural light",
    "among traditional buildings",
    "across a wide landscape",
    "in a documentary photograph",
];

/// Offline backend whose outputs are a pure function of (request, seed).
///
/// Generated text names every double-quoted span of the prompt, in order of
/// first appearance, so prompts that quote entity names get contexts that
/// mention them.
#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    model: String,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            model: format!("mock-v1-seed{seed}"),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of `generate` + `relevance` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn digest(&self, req: &GenerationRequest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(req.canonical().as_bytes());
        h.finalize().into()
    }
}

fn quoted_spans(prompt: &str) -> Vec<&str> {
    let mut spans: Vec<&str> = Vec::new();
    let mut rest = prompt;
    while let Some(start) = rest.find('"') {
        let after = &rest[start + 1..];
        let Some(end) = after.find('"') else { break };
        let span = after[..end].trim();
        if !span.is_empty() && !spans.contains(&span) {
            spans.push(span);
        }
        rest = &after[end + 1..];
    }
    spans
}

impl GenerationBackend for MockBackend {
    fn backend_id(&self) -> &str {
        "mock"
    }

    fn model_id(&self) -> &str {
        &self.model
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let d = self.digest(req);
        let connector = CONNECTORS[d[0] as usize % CONNECTORS.len()];
        let setting = SETTINGS[d[1] as usize % SETTINGS.len()];
        let spans = quoted_spans(&req.prompt);
        let text = match spans.as_slice() {
            [] => format!("The images show a subject {setting}."),
            [one] => format!("{one} is shown {setting}."),
            [first, second, rest @ ..] => {
                let mut s = format!("{first} {connector} {second}");
                for extra in rest {
                    s.push_str(", ");
                    s.push_str(extra);
                }
                s.push(' ');
                s.push_str(setting);
                s.push('.');
                s
            }
        };
        Ok(text)
    }

    fn relevance(&self, req: &GenerationRequest) -> Result<f64> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let d = self.digest(req);
        let bits = u64::from_le_bytes(d[..8].try_into().unwrap()) >> 11;
        Ok(bits as f64 / (1u64 << 53) as f64)
    }
}
