use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    select_images, ConceptualHint, ContextError, GeneratedContext, PromptTemplateSet, RelationTemplate, Result,
    ScoredImage, Subject, Variant, DEFAULT_HINT_TRIPLES, DEFAULT_RELEVANCE_THRESHOLD, MAX_GROUPED_IMAGES,
};
use crate::eval::Query;
use crate::kg::{Dataset, EntityId, KnowledgeGraph, RelationId, Triple};
use crate::vlm::{Clock, GenerationBackend, GenerationRequest, MAX_IMAGES_PER_REQUEST};

/// Appended to the relation-template prompt on the single retry.
pub const TEMPLATE_RETRY_SUFFIX: &str =
    "\nThe template must contain \"[A]\" exactly once and \"[B]\" exactly once.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSettings {
    pub tau: f64,
    pub max_grouped: usize,
    pub hint_triples: usize,
    pub seed: u64,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            tau: DEFAULT_RELEVANCE_THRESHOLD,
            max_grouped: MAX_GROUPED_IMAGES,
            hint_triples: DEFAULT_HINT_TRIPLES,
            seed: 0,
        }
    }
}

/// Relevance-filtered images for one triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredImages {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub head_images: Vec<ScoredImage>,
    pub tail_images: Vec<ScoredImage>,
    /// Images whose scoring failed and were treated as score 0.
    pub skipped: usize,
}

impl FilteredImages {
    pub fn is_grounded(&self) -> bool {
        !self.head_images.is_empty() && !self.tail_images.is_empty()
    }
}

/// Training triples grouped by relation, each group sorted.
#[derive(Debug, Clone)]
pub struct RelationIndex {
    by_relation: Vec<Vec<Triple>>,
}

impl RelationIndex {
    pub fn new(graph: &KnowledgeGraph) -> Self {
        let mut by_relation = vec![Vec::new(); graph.num_relations()];
        for t in graph.train() {
            by_relation[t.relation.index()].push(*t);
        }
        for g in &mut by_relation {
            g.sort_unstable();
        }
        Self { by_relation }
    }

    pub fn triples(&self, r: RelationId) -> &[Triple] {
        self.by_relation.get(r.index()).map_or(&[], Vec::as_slice)
    }

    /// `min(n, available)` triples of `r`, chosen by a stream of `seed`
    /// keyed on the relation and returned in sorted order.
    pub fn sample(&self, r: RelationId, n: usize, seed: u64) -> Vec<Triple> {
        let all = self.triples(r);
        if all.len() <= n {
            return all.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(r.0));
        let mut idx = rand::seq::index::sample(&mut rng, all.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    }
}

pub fn is_valid_template(s: &str) -> bool {
    s.matches("[A]").count() == 1 && s.matches("[B]").count() == 1
}

/// Runs the generation steps for one dataset against one backend.
pub struct ContextGenerator<'a, B: ?Sized> {
    dataset: &'a Dataset,
    backend: &'a B,
    templates: &'a PromptTemplateSet,
    settings: GeneratorSettings,
    clock: Clock,
    relations: RelationIndex,
    skipped_images: AtomicUsize,
}

impl<'a, B: GenerationBackend + ?Sized> ContextGenerator<'a, B> {
    pub fn new(
        dataset: &'a Dataset,
        backend: &'a B,
        templates: &'a PromptTemplateSet,
        settings: GeneratorSettings,
        clock: Clock,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&settings.tau) {
            return Err(ContextError::Config(format!("relevance threshold {} outside [0, 1]", settings.tau)));
        }
        templates.validate()?;
        Ok(Self {
            dataset,
            backend,
            templates,
            settings,
            clock,
            relations: RelationIndex::new(&dataset.graph),
            skipped_images: AtomicUsize::new(0),
        })
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.dataset.graph
    }

    pub fn settings(&self) -> &GeneratorSettings {
        &self.settings
    }

    pub fn relations(&self) -> &RelationIndex {
        &self.relations
    }

    /// Images scored 0 because their relevance request failed.
    pub fn skipped_images(&self) -> usize {
        self.skipped_images.load(Ordering::Relaxed)
    }

    fn name(&self, e: EntityId) -> &str {
        self.graph().entity_name(e)
    }

    fn generate(&self, prompt: String, images: Vec<String>) -> Result<String> {
        let text = self.backend.generate(&GenerationRequest::text(prompt, images))?;
        let text = text.trim();
        if text.is_empty() {
            return Err(ContextError::Backend(crate::vlm::VlmError::Backend {
                status: None,
                message: "empty generation".into(),
            }));
        }
        Ok(text.to_string())
    }

    /// Scores every image of both endpoints against the pair and keeps the
    /// top-scoring ones at or above the threshold. When either endpoint has
    /// no images the result is empty and no requests are made.
    pub fn filter_images(&self, t: Triple) -> Result<FilteredImages> {
        let g = self.graph();
        let mut out = FilteredImages {
            head: g.entity_label(t.head).to_string(),
            relation: g.relation_label(t.relation).to_string(),
            tail: g.entity_label(t.tail).to_string(),
            head_images: Vec::new(),
            tail_images: Vec::new(),
            skipped: 0,
        };
        let (ih, it) = (self.dataset.images(t.head), self.dataset.images(t.tail));
        if ih.is_empty() || it.is_empty() {
            return Ok(out);
        }
        let prompt = self
            .templates
            .relevance
            .fill(&[("head", self.name(t.head)), ("tail", self.name(t.tail))])?;
        let mut score_all = |images: &[String]| -> Vec<ScoredImage> {
            let scores: Vec<f64> = images
                .iter()
                .map(|img| match self.backend.relevance(&GenerationRequest::relevance(prompt.clone(), img.clone())) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("relevance for `{img}` failed, scoring 0: {e}");
                        out.skipped += 1;
                        0.0
                    }
                })
                .collect();
            select_images(&scores, self.settings.tau, self.settings.max_grouped)
                .into_iter()
                .map(|i| ScoredImage {
                    image: images[i].clone(),
                    score: Some(scores[i]),
                })
                .collect()
        };
        let head_images = score_all(ih);
        let tail_images = score_all(it);
        out.head_images = head_images;
        out.tail_images = tail_images;
        self.skipped_images.fetch_add(out.skipped, Ordering::Relaxed);
        Ok(out)
    }

    /// One-sentence link-aware context. Falls back to the names alone when
    /// either filtered set is empty.
    pub fn lamm_context(&self, t: Triple, filtered: &FilteredImages) -> Result<GeneratedContext> {
        let g = self.graph();
        let (h, tl) = (self.name(t.head), self.name(t.tail));
        let subject = Subject::Triple {
            head: g.entity_label(t.head).to_string(),
            relation: g.relation_label(t.relation).to_string(),
            tail: g.entity_label(t.tail).to_string(),
        };
        if !filtered.is_grounded() {
            let prompt = self.templates.relation_summary_fallback.fill(&[("head", h), ("tail", tl)])?;
            return Ok(GeneratedContext {
                variant: Variant::Fichad1,
                subject,
                text: self.generate(prompt, Vec::new())?,
                images: Vec::new(),
                fallback: true,
                timestamp: self.clock.now(),
                head_description: None,
                tail_description: None,
            });
        }
        let refs = |s: &[ScoredImage]| s.iter().map(|i| i.image.clone()).collect::<Vec<_>>();
        let describe = |name: &str, images: &[ScoredImage]| -> Result<String> {
            let prompt = self.templates.entity_description.fill(&[("entity", name)])?;
            self.generate(prompt, refs(images))
        };
        let d_h = describe(h, &filtered.head_images)?;
        let d_t = describe(tl, &filtered.tail_images)?;
        let prompt = self
            .templates
            .relation_summary
            .fill(&[("head", h), ("tail", tl), ("d_h", &d_h), ("d_t", &d_t)])?;
        let mut images = filtered.head_images.clone();
        images.extend(filtered.tail_images.iter().cloned());
        let text = self.generate(prompt, images.iter().map(|i| i.image.clone()).collect())?;
        Ok(GeneratedContext {
            variant: Variant::Fichad1,
            subject,
            text,
            images,
            fallback: false,
            timestamp: self.clock.now(),
            head_description: Some(d_h),
            tail_description: Some(d_t),
        })
    }

    /// Relation-agnostic description from all of the entity's images.
    pub fn entity_summary(&self, e: EntityId) -> Result<GeneratedContext> {
        let name = self.name(e);
        let all = self.dataset.images(e);
        if all.len() > MAX_IMAGES_PER_REQUEST {
            log::warn!(
                "{}: attaching the first {MAX_IMAGES_PER_REQUEST} of {} images",
                self.graph().entity_label(e),
                all.len()
            );
        }
        let images: Vec<String> = all.iter().take(MAX_IMAGES_PER_REQUEST).cloned().collect();
        let fallback = images.is_empty();
        let template = if fallback {
            &self.templates.entity_summary_fallback
        } else {
            &self.templates.entity_summary
        };
        let text = self.generate(template.fill(&[("entity", name)])?, images.clone())?;
        Ok(GeneratedContext {
            variant: Variant::Fichad2,
            subject: Subject::Entity {
                entity: self.graph().entity_label(e).to_string(),
            },
            text,
            images: images
                .into_iter()
                .map(|image| ScoredImage { image, score: None })
                .collect(),
            fallback,
            timestamp: self.clock.now(),
            head_description: None,
            tail_description: None,
        })
    }

    fn triple_lines(&self, triples: &[Triple]) -> String {
        let g = self.graph();
        triples
            .iter()
            .map(|t| {
                format!(
                    "({}, {}, {})",
                    g.entity_name(t.head),
                    g.relation_label(t.relation),
                    g.entity_name(t.tail)
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Likely answer types for `query`, from sampled triples of its relation
    /// and the known entity's visual summary.
    pub fn conceptual_hint(&self, query: &Query, summary: Option<&str>) -> Result<ConceptualHint> {
        let g = self.graph();
        let entity = self.name(query.known);
        let relation = g.relation_label(query.relation);
        let q = query.display(g);
        let sampled = self
            .relations
            .sample(query.relation, self.settings.hint_triples, self.settings.seed);
        let flagged = sampled.is_empty();
        let prompt = if flagged {
            log::warn!("relation `{relation}` has no training triples; hint from its label alone");
            self.templates
                .hint_fallback
                .fill(&[("entity", entity), ("relation", relation), ("query", &q)])?
        } else {
            self.templates.hint.fill(&[
                ("entity", entity),
                ("relation", relation),
                ("query", &q),
                ("triples", &self.triple_lines(&sampled)),
                ("summary", summary.unwrap_or("(none)")),
            ])?
        };
        Ok(ConceptualHint {
            entity: g.entity_label(query.known).to_string(),
            relation: relation.to_string(),
            missing: query.direction,
            text: self.generate(prompt, Vec::new())?,
            triples: sampled
                .iter()
                .map(|t| {
                    [
                        g.entity_label(t.head).to_string(),
                        relation.to_string(),
                        g.entity_label(t.tail).to_string(),
                    ]
                })
                .collect(),
            flagged,
        })
    }

    /// `[A]`/`[B]` verbalization of `r`. An invalid answer is retried once
    /// with a corrective suffix; after that the literal template is used.
    pub fn relation_template(&self, r: RelationId) -> Result<RelationTemplate> {
        let g = self.graph();
        let label = g.relation_label(r);
        let sampled = self.relations.sample(r, DEFAULT_HINT_TRIPLES, self.settings.seed);
        let mut images: Vec<String> = Vec::new();
        let mut seen_heads = Vec::new();
        for t in &sampled {
            if seen_heads.contains(&t.head) || images.len() >= MAX_IMAGES_PER_REQUEST {
                continue;
            }
            seen_heads.push(t.head);
            if let Some(img) = self.dataset.images(t.head).first() {
                images.push(img.clone());
            }
        }
        let triples = if sampled.is_empty() {
            "(none)".to_string()
        } else {
            self.triple_lines(&sampled)
        };
        let prompt = self
            .templates
            .relation_template
            .fill(&[("relation", label), ("triples", &triples)])?;
        for attempt in 1..=2u32 {
            let p = if attempt == 1 {
                prompt.clone()
            } else {
                format!("{prompt}{TEMPLATE_RETRY_SUFFIX}")
            };
            match self.generate(p, images.clone()) {
                Ok(text) if is_valid_template(&text) => {
                    return Ok(RelationTemplate {
                        relation: label.to_string(),
                        template: text,
                        fallback: false,
                        attempts: attempt,
                    })
                }
                Ok(text) => log::warn!("relation `{label}`: template without single [A]/[B]: {text:?}"),
                Err(e) => log::warn!("relation `{label}`: template generation failed: {e}"),
            }
        }
        Ok(RelationTemplate {
            relation: label.to_string(),
            template: RelationTemplate::literal(label),
            fallback: true,
            attempts: 2,
        })
    }
}
