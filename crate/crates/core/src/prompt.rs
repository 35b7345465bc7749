//! Textual KGC input assembly and token-budget truncation.
//!
//! ```text
//! Entity: <name>
//!
//! # Generated Entity Description:
//! <description>
//!
//! # Neighbor Contexts:
//! # <variant>
//! <relation>|<neighbor>:
//! <context>
//!
//! Relation: <relation>
//! # Relation Template:
//! <template>
//!
//! Query: (<head>, <relation>, ?)
//! ```
//!
//! Three header lines end in a space. Inverse edges render as
//! `<relation>^-1|<neighbor>`.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{compose_variant, ContextError, ContextParts, ContextStore, RelationTemplate, Variant};
use crate::eval::{Query, QueryDirection};
use crate::kg::{Descriptions, Direction, KnowledgeGraph};

pub const ENTITY_HEADER: &str = "Entity: ";
pub const DESCRIPTION_HEADER: &str = "# Generated Entity Description: ";
pub const NEIGHBOR_HEADER: &str = "# Neighbor Contexts:";
pub const RELATION_HEADER: &str = "Relation: ";
pub const TEMPLATE_HEADER: &str = "# Relation Template: ";
pub const QUERY_HEADER: &str = "Query: ";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no generated context for query entity `{0}`")]
    NoContext(String),
    #[error("token limit {limit} cannot hold the query line ({needed} tokens)")]
    BudgetTooSmall { limit: usize, needed: usize },
    #[error("token limit must be at least 1")]
    InvalidBudget,
    #[error(transparent)]
    Context(#[from] ContextError),
}

pub type Result<T> = std::result::Result<T, PromptError>;

pub trait TokenCounter: Send + Sync {
    fn id(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-separated words; an approximation of subword counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn id(&self) -> &str {
        "whitespace"
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Clone)]
pub struct TokenBudget {
    limit: usize,
    counter: Arc<dyn TokenCounter>,
}

impl fmt::Debug for TokenBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenBudget")
            .field("limit", &self.limit)
            .field("counter", &self.counter.id())
            .finish()
    }
}

impl TokenBudget {
    pub fn new(limit: usize, counter: Arc<dyn TokenCounter>) -> Result<Self> {
        if limit == 0 {
            return Err(PromptError::InvalidBudget);
        }
        Ok(Self { limit, counter })
    }

    pub fn whitespace(limit: usize) -> Result<Self> {
        Self::new(limit, Arc::new(WhitespaceCounter))
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn count(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    pub fn counter_id(&self) -> &str {
        self.counter.id()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborLine {
    /// Relation label, with `^-1` for edges pointing at the entity.
    pub relation: String,
    pub neighbor: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborBlock {
    pub header: String,
    pub lines: Vec<NeighborLine>,
}

/// The sections of one KGC input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgcInput {
    pub entity: String,
    pub description: String,
    pub neighbors: Vec<NeighborBlock>,
    pub relation: String,
    pub template: String,
    /// `(<head-or-?>, <relation>, <tail-or-?>)`
    pub query: String,
    /// Everything except the query line was cut to meet the budget.
    pub query_only: bool,
}

fn single_line(s: &str) -> String {
    s.split(['\n', '\r']).filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" ")
}

impl KgcInput {
    pub fn query_line(&self) -> String {
        format!("{QUERY_HEADER}{}", self.query)
    }

    pub fn neighbor_count(&self) -> usize {
        self.neighbors.iter().map(|b| b.lines.len()).sum()
    }

    pub fn render(&self) -> String {
        if self.query_only {
            return self.query_line();
        }
        let mut s = String::new();
        s.push_str(ENTITY_HEADER);
        s.push_str(&self.entity);
        s.push_str("\n\n");
        s.push_str(DESCRIPTION_HEADER);
        s.push('\n');
        s.push_str(&self.description);
        s.push_str("\n\n");
        s.push_str(NEIGHBOR_HEADER);
        s.push('\n');
        for block in self.neighbors.iter().filter(|b| !b.lines.is_empty()) {
            s.push_str("# ");
            s.push_str(&block.header);
            s.push('\n');
            for l in &block.lines {
                s.push_str(&format!("{}|{}: \n{}\n", l.relation, l.neighbor, l.text));
            }
        }
        s.push('\n');
        s.push_str(RELATION_HEADER);
        s.push_str(&self.relation);
        s.push('\n');
        s.push_str(TEMPLATE_HEADER);
        s.push('\n');
        s.push_str(&self.template);
        s.push_str("\n\n");
        s.push_str(&self.query_line());
        s
    }

    /// Inverse of [`render`](Self::render) for single-line fields.
    pub fn parse(text: &str) -> Option<Self> {
        let lines: Vec<&str> = text.split('\n').collect();
        if lines.len() == 1 {
            let query = lines[0].strip_prefix(QUERY_HEADER)?;
            return Some(Self {
                entity: String::new(),
                description: String::new(),
                neighbors: Vec::new(),
                relation: String::new(),
                template: String::new(),
                query: query.to_string(),
                query_only: true,
            });
        }
        let n = lines.len();
        if n < 12 {
            return None;
        }
        let entity = lines[0].strip_prefix(ENTITY_HEADER)?;
        let fixed = lines[1].is_empty()
            && lines[2] == DESCRIPTION_HEADER
            && lines[4].is_empty()
            && lines[5] == NEIGHBOR_HEADER
            && lines[n - 2].is_empty()
            && lines[n - 4] == TEMPLATE_HEADER
            && lines[n - 6].is_empty();
        if !fixed {
            return None;
        }
        let query = lines[n - 1].strip_prefix(QUERY_HEADER)?;
        let relation = lines[n - 5].strip_prefix(RELATION_HEADER)?;
        let mut neighbors: Vec<NeighborBlock> = Vec::new();
        let body = &lines[6..n - 6];
        let mut i = 0;
        while i < body.len() {
            if let Some(h) = body[i].strip_prefix("# ") {
                neighbors.push(NeighborBlock {
                    header: h.to_string(),
                    lines: Vec::new(),
                });
                i += 1;
                continue;
            }
            let head = body[i].strip_suffix(": ")?;
            let (relation, neighbor) = head.split_once('|')?;
            let text = body.get(i + 1)?;
            neighbors.last_mut()?.lines.push(NeighborLine {
                relation: relation.to_string(),
                neighbor: neighbor.to_string(),
                text: text.to_string(),
            });
            i += 2;
        }
        if neighbors.iter().any(|b| b.lines.is_empty()) {
            return None;
        }
        Some(Self {
            entity: entity.to_string(),
            description: lines[3].to_string(),
            neighbors,
            relation: relation.to_string(),
            template: lines[n - 3].to_string(),
            query: query.to_string(),
            query_only: false,
        })
    }
}

/// Byte length of the first `n` whitespace-separated words of `s`.
fn word_prefix(s: &str, n: usize) -> &str {
    if n == 0 {
        return "";
    }
    let mut seen = 0;
    let mut in_word = false;
    for (i, c) in s.char_indices() {
        if c.is_whitespace() {
            if in_word {
                seen += 1;
                if seen == n {
                    return &s[..i];
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    s
}

/// Cuts `input` until it fits: neighbor entries last-first, then the
/// description's word suffix. If neither suffices only the query line is
/// kept. Returns whether anything was removed.
pub fn truncate_input(input: &mut KgcInput, budget: &TokenBudget) -> Result<bool> {
    let fits = |i: &KgcInput| budget.count(&i.render()) <= budget.limit();
    if fits(input) {
        return Ok(false);
    }
    while !input.query_only && input.neighbor_count() > 0 {
        let block = input.neighbors.iter_mut().rev().find(|b| !b.lines.is_empty()).unwrap();
        block.lines.pop();
        input.neighbors.retain(|b| !b.lines.is_empty());
        if fits(input) {
            return Ok(true);
        }
    }
    if !input.query_only {
        let full = std::mem::take(&mut input.description);
        let words = full.split_whitespace().count();
        input.description = String::new();
        if fits(input) {
            // largest prefix that still fits
            let (mut lo, mut hi) = (0, words);
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                input.description = word_prefix(&full, mid).to_string();
                if fits(input) {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            input.description = word_prefix(&full, lo).to_string();
            return Ok(true);
        }
        input.query_only = true;
    }
    let needed = budget.count(&input.query_line());
    if needed > budget.limit() {
        return Err(PromptError::BudgetTooSmall {
            limit: budget.limit(),
            needed,
        });
    }
    Ok(true)
}

/// [`truncate_input`] on rendered text. Text that is not in the KGC layout
/// is cut to a word prefix.
pub fn truncate(text: &str, budget: &TokenBudget) -> Result<String> {
    if budget.count(text) <= budget.limit() {
        return Ok(text.to_string());
    }
    match KgcInput::parse(text) {
        Some(mut input) if input.render() == text => {
            truncate_input(&mut input, budget)?;
            Ok(input.render())
        }
        _ => {
            let words = text.split_whitespace().count();
            let (mut lo, mut hi) = (0, words);
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                if budget.count(word_prefix(text, mid)) <= budget.limit() {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            Ok(word_prefix(text, lo).to_string())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub k: usize,
    pub variant: Variant,
    /// Emit both a link-aware and an entity-summary neighbor block.
    pub both: bool,
    /// Let `+x`/`+y` fall back to the base text when the supplement is missing.
    pub degrade: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            k: 5,
            variant: Variant::Fichad1,
            both: false,
            degrade: true,
        }
    }
}

pub type HintKey = (String, String, QueryDirection);

/// Everything prompts are assembled from.
#[derive(Debug, Clone, Copy)]
pub struct PromptSources<'a> {
    pub graph: &'a KnowledgeGraph,
    pub store: &'a ContextStore,
    /// Relation label to template.
    pub templates: &'a HashMap<String, String>,
    pub hints: &'a HashMap<HintKey, String>,
    pub descriptions: Option<&'a Descriptions>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildWarnings {
    pub missing_neighbor_contexts: usize,
    pub degraded: usize,
    pub missing_templates: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPrompt {
    pub input: KgcInput,
    pub text: String,
    pub n_tokens: usize,
    pub truncated: bool,
    pub warnings: BuildWarnings,
}

/// One line of `prompts.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub query: String,
    pub text: String,
    pub n_tokens: usize,
    pub truncated: bool,
}

impl From<&BuiltPrompt> for PromptRecord {
    fn from(b: &BuiltPrompt) -> Self {
        Self {
            query: b.input.query.clone(),
            text: b.text.clone(),
            n_tokens: b.n_tokens,
            truncated: b.truncated,
        }
    }
}

pub fn build_kgc_input(
    query: &Query,
    src: &PromptSources<'_>,
    opts: &PromptOptions,
    budget: &TokenBudget,
) -> Result<BuiltPrompt> {
    let g = src.graph;
    let e = query.known;
    let label = g.entity_label(e);
    let db = |id| src.descriptions.and_then(|d| d.get(id));
    let mut warnings = BuildWarnings::default();

    let base = src
        .store
        .summary(label)
        .or_else(|| src.store.first_lamm_touching(label))
        .ok_or_else(|| PromptError::NoContext(label.to_string()))?;
    let mut description = single_line(&base.text);
    let hint = src
        .hints
        .get(&(label.to_string(), g.relation_label(query.relation).to_string(), query.direction));
    let supplement = match opts.variant {
        Variant::Fichad1X => Some(ContextParts {
            lamm: Some(&description),
            db_description: db(e),
            ..Default::default()
        }),
        Variant::Fichad1Y => Some(ContextParts {
            lamm: Some(&description),
            hint: hint.map(String::as_str),
            ..Default::default()
        }),
        _ => None,
    };
    if let Some(parts) = supplement {
        let c = compose_variant(opts.variant, parts, opts.degrade)?;
        warnings.degraded += usize::from(c.degraded);
        description = single_line(&c.text);
    }

    let mut lamm_block = NeighborBlock {
        header: if opts.variant == Variant::Fichad2 {
            Variant::Fichad1.name().to_string()
        } else {
            opts.variant.name().to_string()
        },
        lines: Vec::new(),
    };
    let mut summary_block = NeighborBlock {
        header: Variant::Fichad2.name().to_string(),
        lines: Vec::new(),
    };
    let want_lamm = opts.variant.uses_lamm() || opts.both;
    let want_summary = opts.variant == Variant::Fichad2 || opts.both;
    for n in g.neighbors(e, opts.k) {
        let t = n.triple(e);
        let rel = g.relation_label(n.relation);
        let relation = match n.direction {
            Direction::Out => rel.to_string(),
            Direction::In => format!("{rel}^-1"),
        };
        let neighbor = g.entity_name(n.entity).to_string();
        if want_lamm {
            let lamm = src
                .store
                .lamm(g.entity_label(t.head), rel, g.entity_label(t.tail))
                .map(|c| c.text.as_str());
            match lamm {
                Some(text) => {
                    let text = if opts.variant == Variant::Fichad1X {
                        let parts = ContextParts {
                            lamm: Some(text),
                            db_description: db(n.entity),
                            ..Default::default()
                        };
                        let c = compose_variant(Variant::Fichad1X, parts, opts.degrade)?;
                        warnings.degraded += usize::from(c.degraded);
                        c.text
                    } else {
                        text.to_string()
                    };
                    lamm_block.lines.push(NeighborLine {
                        relation: relation.clone(),
                        neighbor: neighbor.clone(),
                        text: single_line(&text),
                    });
                }
                None => warnings.missing_neighbor_contexts += 1,
            }
        }
        if want_summary {
            match src.store.summary(g.entity_label(n.entity)) {
                Some(c) => summary_block.lines.push(NeighborLine {
                    relation,
                    neighbor,
                    text: single_line(&c.text),
                }),
                None => warnings.missing_neighbor_contexts += 1,
            }
        }
    }
    if warnings.missing_neighbor_contexts > 0 {
        log::warn!("{label}: {} neighbor contexts missing", warnings.missing_neighbor_contexts);
    }

    let rel = g.relation_label(query.relation);
    let template = match src.templates.get(rel) {
        Some(t) => single_line(t),
        None => {
            warnings.missing_templates += 1;
            RelationTemplate::literal(rel)
        }
    };
    let mut neighbors = Vec::new();
    if want_lamm {
        neighbors.push(lamm_block);
    }
    if want_summary {
        neighbors.push(summary_block);
    }
    let mut input = KgcInput {
        entity: g.entity_name(e).to_string(),
        description,
        neighbors,
        relation: rel.to_string(),
        template,
        query: query.display(g),
        query_only: false,
    };
    let truncated = truncate_input(&mut input, budget)?;
    let text = input.render();
    Ok(BuiltPrompt {
        n_tokens: budget.count(&text),
        text,
        input,
        truncated,
        warnings,
    })
}
