//! Multimodal context generation.
//!
//! Link-aware contexts (`FICHAD-1`) describe one triple from images that a
//! relevance check keeps for both endpoints; entity summaries (`FICHAD-2`)
//! describe one entity from all of its images. The `+x` and `+y` variants
//! are composed at prompt-build time from a base context plus a database
//! description or a conceptual hint.

mod generate;
mod stats;
mod template;

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::QueryDirection;
use crate::kg::first_sentence;
use crate::vlm::VlmError;

pub use generate::{
    is_valid_template, ContextGenerator, FilteredImages, GeneratorSettings, RelationIndex, TEMPLATE_RETRY_SUFFIX,
};
pub use stats::{corpus_stats, names_entity, CoverageStats};
pub use template::{PromptTemplateSet, Template};

/// Retained images per endpoint after relevance filtering.
pub const MAX_GROUPED_IMAGES: usize = 5;
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.85;
pub const DEFAULT_HINT_TRIPLES: usize = 20;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("template `{template}`: {message}")]
    Template { template: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Backend(#[from] VlmError),
    #[error("{variant} requires a {part}")]
    MissingPart { variant: Variant, part: &'static str },
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ContextError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "FICHAD-1")]
    Fichad1,
    #[serde(rename = "FICHAD-2")]
    Fichad2,
    #[serde(rename = "FICHAD-1+x")]
    Fichad1X,
    #[serde(rename = "FICHAD-1+y")]
    Fichad1Y,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fichad1, Variant::Fichad2, Variant::Fichad1X, Variant::Fichad1Y];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fichad1 => "FICHAD-1",
            Variant::Fichad2 => "FICHAD-2",
            Variant::Fichad1X => "FICHAD-1+x",
            Variant::Fichad1Y => "FICHAD-1+y",
        }
    }

    /// Whether neighbor lines come from link-aware contexts.
    pub fn uses_lamm(self) -> bool {
        self != Variant::Fichad2
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let t = s.to_ascii_lowercase();
        let t = t.strip_prefix("fichad-").or_else(|| t.strip_prefix("fichad")).unwrap_or(&t);
        match t {
            "1" => Ok(Variant::Fichad1),
            "2" => Ok(Variant::Fichad2),
            "1+x" | "1x" => Ok(Variant::Fichad1X),
            "1+y" | "1y" => Ok(Variant::Fichad1Y),
            _ => Err(format!("unknown variant `{s}` (expected fichad-1, fichad-2, fichad-1+x, fichad-1+y)")),
        }
    }
}

/// What a context describes, by entity and relation labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Subject {
    Triple { head: String, relation: String, tail: String },
    Entity { entity: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image: String,
    /// Relevance score; absent for unfiltered entity summaries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedContext {
    pub variant: Variant,
    pub subject: Subject,
    pub text: String,
    pub images: Vec<ScoredImage>,
    pub fallback: bool,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_description: Option<String>,
}

impl GeneratedContext {
    /// Entity labels this context is about.
    pub fn endpoints(&self) -> Vec<&str> {
        match &self.subject {
            Subject::Triple { head, tail, .. } => vec![head.as_str(), tail.as_str()],
            Subject::Entity { entity } => vec![entity.as_str()],
        }
    }
}

/// Per-relation verbalization with `[A]`/`[B]` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub relation: String,
    pub template: String,
    pub fallback: bool,
    pub attempts: u32,
}

impl RelationTemplate {
    pub fn literal(relation: &str) -> String {
        format!("[A] {relation} [B]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptualHint {
    /// Label of the known entity.
    pub entity: String,
    pub relation: String,
    /// Which side of the query is missing.
    pub missing: QueryDirection,
    pub text: String,
    pub triples: Vec<[String; 3]>,
    /// Set when no example triples were available.
    pub flagged: bool,
}

type TripleKey = (String, String, String);

/// Generated contexts with lookup by triple (link-aware) and entity
/// (summaries). Later entries replace earlier ones with the same subject.
#[derive(Debug, Clone, Default)]
pub struct ContextStore {
    contexts: Vec<GeneratedContext>,
    triples: HashMap<TripleKey, usize>,
    entities: HashMap<String, usize>,
    first_touching: HashMap<String, usize>,
}

impl ContextStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_contexts(contexts: impl IntoIterator<Item = GeneratedContext>) -> Self {
        let mut s = Self::new();
        for c in contexts {
            s.push(c);
        }
        s
    }

    pub fn push(&mut self, ctx: GeneratedContext) {
        let idx = self.contexts.len();
        match (&ctx.variant, &ctx.subject) {
            (Variant::Fichad1, Subject::Triple { head, relation, tail }) => {
                self.triples.insert((head.clone(), relation.clone(), tail.clone()), idx);
                for e in [head, tail] {
                    self.first_touching.entry(e.clone()).or_insert(idx);
                }
            }
            (Variant::Fichad2, Subject::Entity { entity }) => {
                self.entities.insert(entity.clone(), idx);
            }
            _ => {}
        }
        self.contexts.push(ctx);
    }

    pub fn contexts(&self) -> &[GeneratedContext] {
        &self.contexts
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn lamm(&self, head: &str, relation: &str, tail: &str) -> Option<&GeneratedContext> {
        self.triples
            .get(&(head.to_string(), relation.to_string(), tail.to_string()))
            .map(|&i| &self.contexts[i])
    }

    pub fn summary(&self, entity: &str) -> Option<&GeneratedContext> {
        self.entities.get(entity).map(|&i| &self.contexts[i])
    }

    /// The earliest link-aware context with `entity` as an endpoint.
    pub fn first_lamm_touching(&self, entity: &str) -> Option<&GeneratedContext> {
        self.first_touching.get(entity).map(|&i| &self.contexts[i])
    }

    pub fn read<R: Read>(reader: R, source: &str) -> Result<Self> {
        Ok(Self::from_contexts(read_jsonl::<GeneratedContext, _>(reader, source)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_contexts(load_jsonl::<GeneratedContext>(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_jsonl(path, &self.contexts)
    }
}

pub fn read_jsonl<T: DeserializeOwned, R: Read>(reader: R, source: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| ContextError::Io {
            path: source.to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ContextError::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|source| ContextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_jsonl(f, &path.display().to_string())
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let io = |source| ContextError::Io {
        path: path.display().to_string(),
        source,
    };
    let f = File::create(path).map_err(io)?;
    write_jsonl(BufWriter::new(f), items).map_err(io)
}

/// Indices of retained images: score ≥ `tau`, at most `max` of them chosen
/// by descending score (ties by position), returned in input order.
pub fn select_images(scores: &[f64], tau: f64, max: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= tau).collect();
    keep.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    keep.truncate(max);
    keep.sort_unstable();
    keep
}

/// Inputs available for composing one context.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContextParts<'a> {
    pub lamm: Option<&'a str>,
    pub entity_summary: Option<&'a str>,
    pub db_description: Option<&'a str>,
    pub hint: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composed {
    pub text: String,
    /// A `+x`/`+y` supplement was missing and the base text was used.
    pub degraded: bool,
}

/// Joins the base context and the variant's supplement with one space.
/// With `degrade`, a missing supplement falls back to the base text.
pub fn compose_variant(variant: Variant, parts: ContextParts<'_>, degrade: bool) -> Result<Composed> {
    fn require<'a>(v: Option<&'a str>, variant: Variant, part: &'static str) -> Result<&'a str> {
        v.ok_or(ContextError::MissingPart { variant, part })
    }
    let (base, supplement) = match variant {
        Variant::Fichad1 => (require(parts.lamm, variant, "link-aware context")?, None),
        Variant::Fichad2 => (require(parts.entity_summary, variant, "entity summary")?, None),
        Variant::Fichad1X => {
            let first = parts.db_description.map(first_sentence).filter(|s| !s.trim().is_empty());
            (require(parts.lamm, variant, "link-aware context")?, Some((first, "database description")))
        }
        Variant::Fichad1Y => {
            let hint = parts.hint.filter(|s| !s.trim().is_empty());
            (require(parts.lamm, variant, "link-aware context")?, Some((hint, "conceptual hint")))
        }
    };
    match supplement {
        None => Ok(Composed {
            text: base.to_string(),
            degraded: false,
        }),
        Some((Some(extra), _)) => Ok(Composed {
            text: format!("{base} {}", extra.trim()),
            degraded: false,
        }),
        Some((None, part)) if !degrade => Err(ContextError::MissingPart { variant, part }),
        Some((None, _)) => Ok(Composed {
            text: base.to_string(),
            degraded: true,
        }),
    }
}
