//! Artifact-level steps behind the command-line tool.
//!
//! Every step reads a [`RunConfig`], loads what it needs from the dataset
//! config and the output directory, and writes a fixed-name artifact there.
//! Steps that talk to a generation backend go through the response cache in
//! `cache.jsonl`, so re-running a step repeats no backend calls.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context::{
    corpus_stats, load_jsonl, save_jsonl, ConceptualHint, ContextError, ContextGenerator, ContextStore,
    CoverageStats, FilteredImages, GeneratedContext, GeneratorSettings, PromptTemplateSet, RelationTemplate,
    Variant, DEFAULT_HINT_TRIPLES, DEFAULT_RELEVANCE_THRESHOLD, MAX_GROUPED_IMAGES,
};
use crate::embed::{train_logged, EmbedError, EmbeddingModel, Family, Loss, Norm, TrainConfig};
use crate::eval::{evaluate, EvalError, Query, QueryDirection};
use crate::kg::{Dataset, DatasetConfig, EntityId, KgError, RelationId, Split, Triple};
use crate::prompt::{build_kgc_input, HintKey, PromptError, PromptOptions, PromptRecord, PromptSources, TokenBudget};
use crate::vlm::{CachedBackend, Clock, GenerationBackend, MockBackend, OpenAiBackend, OpenAiConfig, ResponseCache, VlmError};

pub const INGEST_FILE: &str = "ingest.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const FILTERED_FILE: &str = "filtered.jsonl";
pub const CONTEXTS_FILE: &str = "contexts.jsonl";
pub const HINTS_FILE: &str = "hints.jsonl";
pub const TEMPLATES_FILE: &str = "templates.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const COVERAGE_FILE: &str = "coverage.json";
pub const CACHE_FILE: &str = "cache.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Vlm(#[from] VlmError),
}

fn vlm_is_backend(e: &VlmError) -> bool {
    matches!(e, VlmError::Backend { .. } | VlmError::Capability(_))
}

impl PipelineError {
    /// Failures of the generation backend, as opposed to bad inputs.
    pub fn is_backend(&self) -> bool {
        match self {
            PipelineError::Vlm(e)
            | PipelineError::Context(ContextError::Backend(e))
            | PipelineError::Prompt(PromptError::Context(ContextError::Backend(e))) => vlm_is_backend(e),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// The wire backend when an endpoint is configured, otherwise the mock.
    #[default]
    Auto,
    Mock,
    Openai,
}

/// Which triples receive link-aware contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Every training triple.
    #[default]
    All,
    /// Training edges of the entities queried in the prompt split.
    Neighbors,
}

/// Training overrides; unset fields take the family defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub family: Family,
    pub dim: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub negatives: Option<usize>,
    pub margin: Option<f64>,
    pub loss: Option<Loss>,
    pub l2: Option<f64>,
    pub norm: Option<Norm>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            family: Family::TransE,
            dim: None,
            epochs: None,
            learning_rate: None,
            batch_size: None,
            negatives: None,
            margin: None,
            loss: None,
            l2: None,
            norm: None,
        }
    }
}

impl TrainOptions {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(self.family);
        c.seed = seed;
        c.dim = self.dim.unwrap_or(c.dim);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.learning_rate = self.learning_rate.unwrap_or(c.learning_rate);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.negatives = self.negatives.unwrap_or(c.negatives);
        c.margin = self.margin.unwrap_or(c.margin);
        c.loss = self.loss.or(c.loss);
        c.l2 = self.l2.unwrap_or(c.l2);
        c.norm = self.norm.unwrap_or(c.norm);
        c
    }
}

/// The full, recordable configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset config file.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub backend: BackendKind,
    pub openai: OpenAiConfig,
    pub seed: u64,
    pub tau: f64,
    /// Overrides the dataset's per-entity image cap.
    pub image_cap: Option<usize>,
    pub k: usize,
    pub variant: Variant,
    pub both: bool,
    pub degrade: bool,
    pub token_limit: usize,
    pub hint_triples: usize,
    pub scope: Scope,
    /// Directory of prompt template overrides.
    pub prompts_dir: Option<PathBuf>,
    /// Worker threads; 0 uses one per core.
    pub jobs: usize,
    /// Split whose triples are evaluated and turned into prompts.
    pub split: Split,
    /// Checkpoint for `eval`; defaults to the one in `out`.
    pub model: Option<PathBuf>,
    /// Context store for `stats`/`coverage`; defaults to the one in `out`.
    pub store: Option<PathBuf>,
    pub train: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("out"),
            backend: BackendKind::Auto,
            openai: OpenAiConfig::default(),
            seed: 0,
            tau: DEFAULT_RELEVANCE_THRESHOLD,
            image_cap: None,
            k: 5,
            variant: Variant::Fichad1,
            both: false,
            degrade: true,
            token_limit: 120,
            hint_triples: DEFAULT_HINT_TRIPLES,
            scope: Scope::All,
            prompts_dir: None,
            jobs: 0,
            split: Split::Test,
            model: None,
            store: None,
            train: TrainOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn effective_backend(&self) -> BackendKind {
        match self.backend {
            BackendKind::Auto if self.openai.endpoint.trim().is_empty() => BackendKind::Mock,
            BackendKind::Auto => BackendKind::Openai,
            b => b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Input(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.token_limit == 0 {
            return bad("token limit must be at least 1".into());
        }
        if self.image_cap == Some(0) {
            return bad("image cap must be at least 1".into());
        }
        if self.effective_backend() == BackendKind::Openai {
            if self.openai.endpoint.trim().is_empty() {
                return bad("the openai backend needs `openai.endpoint`".into());
            }
            if std::env::var(&self.openai.api_key_env).map_or(true, |k| k.is_empty()) {
                return bad(format!("the openai backend needs the API key in ${}", self.openai.api_key_env));
            }
        }
        Ok(())
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// A step's JSON summary plus optional human-readable text.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub summary: Value,
    pub text: Option<String>,
}

impl StepOutput {
    fn json(summary: Value) -> Self {
        Self { summary, text: None }
    }
}

type Backend = CachedBackend<Box<dyn GenerationBackend>>;

pub struct Pipeline {
    config: RunConfig,
    pool: rayon::ThreadPool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn dedup_in_order<T: Copy + Eq + std::hash::Hash>(items: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|t| seen.insert(*t)).collect()
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| PipelineError::Input(format!("thread pool: {e}")))?;
        Ok(Self { config, pool })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.config.out).map_err(io_err(&self.config.out))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        self.ensure_out()?;
        let path = self.config.artifact(name);
        let text = serde_json::to_string_pretty(value).expect("serializable");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(path)
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, items: &[T]) -> Result<PathBuf> {
        self.ensure_out()?;
        let path = self.config.artifact(name);
        save_jsonl(&path, items)?;
        Ok(path)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let path = self
            .config
            .dataset
            .as_ref()
            .ok_or_else(|| PipelineError::Input("no dataset config given (--dataset)".into()))?;
        let mut dc = DatasetConfig::load(path)?;
        if let Some(cap) = self.config.image_cap {
            dc.image_cap = cap;
        }
        if self.config.variant == Variant::Fichad1X && dc.descriptions.is_none() {
            return Err(PipelineError::Input(format!(
                "{} needs a descriptions file in the dataset config",
                Variant::Fichad1X
            )));
        }
        Ok(Dataset::load(&dc)?)
    }

    fn templates(&self) -> Result<PromptTemplateSet> {
        Ok(match &self.config.prompts_dir {
            Some(dir) => PromptTemplateSet::load_dir(dir)?,
            None => PromptTemplateSet::default(),
        })
    }

    fn backend(&self) -> Result<(Backend, Clock)> {
        self.ensure_out()?;
        let cache = Arc::new(ResponseCache::open(&self.config.artifact(CACHE_FILE))?);
        let (inner, clock): (Box<dyn GenerationBackend>, Clock) = match self.config.effective_backend() {
            BackendKind::Openai => (Box::new(OpenAiBackend::new(self.config.openai.clone())?), Clock::System),
            _ => (Box::new(MockBackend::new(self.config.seed)), Clock::Fixed(0)),
        };
        Ok((CachedBackend::new(inner, cache, clock), clock))
    }

    fn settings(&self) -> GeneratorSettings {
        GeneratorSettings {
            tau: self.config.tau,
            max_grouped: MAX_GROUPED_IMAGES,
            hint_triples: self.config.hint_triples,
            seed: self.config.seed,
        }
    }

    fn queries(&self, ds: &Dataset) -> Vec<Query> {
        ds.graph
            .split(self.config.split)
            .iter()
            .flat_map(|t| [Query::tail(*t), Query::head(*t)])
            .collect()
    }

    fn scope_triples(&self, ds: &Dataset) -> Vec<Triple> {
        let g = &ds.graph;
        match self.config.scope {
            Scope::All => dedup_in_order(g.train().iter().copied()),
            Scope::Neighbors => {
                let centers = dedup_in_order(g.split(self.config.split).iter().flat_map(|t| [t.head, t.tail]));
                dedup_in_order(
                    centers
                        .into_iter()
                        .flat_map(|e| g.neighbors(e, self.config.k).iter().map(move |n| n.triple(e))),
                )
            }
        }
    }

    pub fn ingest(&self) -> Result<StepOutput> {
        let ds = self.dataset()?;
        let g = &ds.graph;
        let summary = json!({
            "dataset": ds.id,
            "entities": g.num_entities(),
            "relations": g.num_relations(),
            "train": g.split(Split::Train).len(),
            "valid": g.split(Split::Valid).len(),
            "test": g.split(Split::Test).len(),
            "entities_with_images": ds.images.images.iter().filter(|v| !v.is_empty()).count(),
            "image_cap": ds.images.cap,
            "images_truncated": ds.images.truncated,
            "images_skipped_unknown": ds.images.skipped_unknown,
            "descriptions": ds.descriptions.as_ref().map(|d| d.len()),
        });
        let path = self.write_json(INGEST_FILE, &summary)?;
        let mut summary = summary;
        summary["artifact"] = json!(path);
        Ok(StepOutput::json(summary))
    }

    pub fn train_embed(&self) -> Result<StepOutput> {
        let ds = self.dataset()?;
        let cfg = self.config.train.train_config(self.config.seed);
        let (model, log) = self.pool.install(|| train_logged(&cfg, &ds.graph))?;
        self.ensure_out()?;
        let path = self.config.artifact(MODEL_FILE);
        model.save(&path)?;
        Ok(StepOutput::json(json!({
            "family": cfg.family,
            "dim": cfg.dim,
            "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "final_loss": log.epoch_loss.last(),
            "artifact": path,
        })))
    }

    pub fn eval(&self) -> Result<StepOutput> {
        let ds = self.dataset()?;
        let path = self.config.model.clone().unwrap_or_else(|| self.config.artifact(MODEL_FILE));
        let model = EmbeddingModel::load(&path)?;
        if model.num_entities() != ds.graph.num_entities() || model.num_relations() != ds.graph.num_relations() {
            return Err(PipelineError::Input(format!(
                "{} has {} entities / {} relations but the dataset has {} / {}",
                path.display(),
                model.num_entities(),
                model.num_relations(),
                ds.graph.num_entities(),
                ds.graph.num_relations()
            )));
        }
        let report = self.pool.install(|| evaluate(&model, &ds.graph, self.config.split))?;
        self.write_json(REPORT_FILE, &report)?;
        Ok(StepOutput {
            summary: serde_json::to_value(&report).expect("serializable"),
            text: Some(report.to_string()),
        })
    }

    fn filter_all(&self, gen: &ContextGenerator<'_, Backend>, triples: &[Triple]) -> Result<Vec<FilteredImages>> {
        self.pool
            .install(|| triples.par_iter().map(|t| gen.filter_images(*t)).collect::<std::result::Result<Vec<_>, _>>())
            .map_err(Into::into)
    }

    pub fn filter_images(&self) -> Result<StepOutput> {
        let ds = self.dataset()?;
        let tpl = self.templates()?;
        let (backend, clock) = self.backend()?;
        let gen = ContextGenerator::new(&ds, &backend, &tpl, self.settings(), clock)?;
        let triples = self.scope_triples(&ds);
        let filtered = self.filter_all(&gen, &triples)?;
        let path = self.write_jsonl(FILTERED_FILE, &filtered)?;
        Ok(StepOutput::json(json!({
            "triples": filtered.len(),
            "grounded": filtered.iter().filter(|f| f.is_grounded()).count(),
            "retained_images": filtered.iter().map(|f| f.head_images.len() + f.tail_images.len()).sum::<usize>(),
            "skipped_images": gen.skipped_images(),
            "tau": self.config.tau,
            "backend_calls": backend.backend_calls(),
            "artifact": path,
        })))
    }

    pub fn gen_context(&self) -> Result<StepOutput> {
        let ds = self.dataset()?;
        let tpl = self.templates()?;
        let (backend, clock) = self.backend()?;
        let gen = ContextGenerator::new(&ds, &backend, &tpl, self.settings(), clock)?;

        let mut contexts: Vec<GeneratedContext> = Vec::new();
        let mut filtered_out = None;
        if self.config.variant.uses_lamm() {
            let triples = self.scope_triples(&ds);
            let filtered = self.filter_all(&gen, &triples)?;
            let lamm = self.pool.install(|| {
                triples
                    .par_iter()
                    .zip(&filtered)
                    .map(|(t, f)| gen.lamm_context(*t, f))
                    .collect::<std::result::Result<Vec<_>, _>>()
            })?;
            contexts.extend(lamm);
            filtered_out = Some(self.write_jsonl(FILTERED_FILE, &filtered)?);
        }
        let entities: Vec<EntityId> = (0..ds.graph.num_entities() as u32).map(EntityId).collect();
        let summaries = self.pool.install(|| {
            entities
                .par_iter()
                .map(|e| gen.entity_summary(*e))
                .collect::<std::result::Result<Vec<_>, _>>()
        })?;
        contexts.extend(summaries);

        let store = ContextStore::from_contexts(contexts);
        let path = self.write_jsonl(CONTEXTS_FILE, store.contexts())?;
        let count = |v: Variant, fb: bool| {
            store
                .contexts()
                .iter()
                .filter(|c| c.variant == v && c.fallback == fb)
                .count()
        };
        Ok(StepOutput::json(json!({
            "variant": self.config.variant,
            "fichad1": count(Variant::Fichad1, false),
            "fichad1_fallbacks": count(Variant::Fichad1, true),
            "fichad2": count(Variant::Fichad2, false),
            "fichad2_fallbacks": count(Variant::Fichad2, true),
            "skipped_images": gen.skipped_images(),
            "backend_calls": backend.backend_calls(),
            "cache_entries": backend.cache().len(),
            "artifact": path,
            "filtered": filtered_out,
        })))
    }

    fn load_store(&self) -> Result<ContextStore> {
        let path = self.config.store.clone().unwrap_or_else(|| self.config.artifact(CONTEXTS_FILE));
        if !path.exists() {
            return Err(PipelineError::Input(format!(
                "{} not found; run gen-context first",
                path.display()
            )));
        }
        Ok(ContextStore::load(&path)?)
    }

    pub fn hints(&self) -> Result<StepOutput> {
        let ds = self.dataset()?;
        let tpl = self.templates()?;
        let store_path = self.config.artifact(CONTEXTS_FILE);
        let store = if store_path.exists() {
            ContextStore::load(&store_path)?
        } else {
            ContextStore::new()
        };
        let (backend, clock) = self.backend()?;
        let gen = ContextGenerator::new(&ds, &backend, &tpl, self.settings(), clock)?;
        let queries = dedup_in_order(self.queries(&ds).into_iter().map(|q| (q.direction, q.known, q.relation)));
        let hints: Vec<ConceptualHint> = self.pool.install(|| {
            queries
                .par_iter()
                .map(|&(direction, known, relation)| {
                    let q = Query {
                        direction,
                        known,
                        relation,
                        answer: known,
                    };
                    let summary = store.summary(ds.graph.entity_label(known)).map(|c| c.text.as_str());
                    gen.conceptual_hint(&q, summary)
                })
                .collect::<std::result::Result<Vec<_>, _>>()
        })?;
        let path = self.write_jsonl(HINTS_FILE, &hints)?;
        Ok(StepOutput::json(json!({
            "hints": hints.len(),
            "flagged": hints.iter().filter(|h| h.flagged).count(),
            "backend_calls": backend.backend_calls(),
            "artifact": path,
        })))
    }

    pub fn templates_step(&self) -> Result<StepOutput> {
        let ds = self.dataset()?;
        let tpl = self.templates()?;
        let (backend, clock) = self.backend()?;
        let gen = ContextGenerator::new(&ds, &backend, &tpl, self.settings(), clock)?;
        let relations: Vec<RelationId> = (0..ds.graph.num_relations() as u32).map(RelationId).collect();
        let templates: Vec<RelationTemplate> = self.pool.install(|| {
            relations
                .par_iter()
                .map(|r| gen.relation_template(*r))
                .collect::<std::result::Result<Vec<_>, _>>()
        })?;
        let path = self.write_jsonl(TEMPLATES_FILE, &templates)?;
        Ok(StepOutput::json(json!({
            "templates": templates.len(),
            "fallbacks": templates.iter().filter(|t| t.fallback).count(),
            "backend_calls": backend.backend_calls(),
            "artifact": path,
        })))
    }

    /// Writes `prompts.jsonl`; `preview` returns the first texts as well.
    pub fn build_prompts(&self, preview: usize) -> Result<StepOutput> {
        let ds = self.dataset()?;
        let store = self.load_store()?;
        let tpath = self.config.artifact(TEMPLATES_FILE);
        let templates: HashMap<String, String> = if tpath.exists() {
            load_jsonl::<RelationTemplate>(&tpath)?
                .into_iter()
                .map(|t| (t.relation, t.template))
                .collect()
        } else {
            log::warn!("{} not found; using literal relation templates", tpath.display());
            HashMap::new()
        };
        let hpath = self.config.artifact(HINTS_FILE);
        let hints: HashMap<HintKey, String> = if hpath.exists() {
            load_jsonl::<ConceptualHint>(&hpath)?
                .into_iter()
                .map(|h| ((h.entity, h.relation, h.missing), h.text))
                .collect()
        } else {
            if self.config.variant == Variant::Fichad1Y && !self.config.degrade {
                return Err(PipelineError::Input(format!("{} not found; run hints first", hpath.display())));
            }
            HashMap::new()
        };
        let src = PromptSources {
            graph: &ds.graph,
            store: &store,
            templates: &templates,
            hints: &hints,
            descriptions: ds.descriptions.as_ref(),
        };
        let opts = PromptOptions {
            k: self.config.k,
            variant: self.config.variant,
            both: self.config.both,
            degrade: self.config.degrade,
        };
        let budget = TokenBudget::whitespace(self.config.token_limit)?;
        let queries = self.queries(&ds);
        let built = self.pool.install(|| {
            queries
                .par_iter()
                .map(|q| build_kgc_input(q, &src, &opts, &budget))
                .collect::<std::result::Result<Vec<_>, _>>()
        })?;
        let records: Vec<PromptRecord> = built.iter().map(PromptRecord::from).collect();
        let path = self.write_jsonl(PROMPTS_FILE, &records)?;
        let sum = |f: fn(&crate::prompt::BuildWarnings) -> usize| built.iter().map(|b| f(&b.warnings)).sum::<usize>();
        let text = (preview > 0).then(|| {
            built
                .iter()
                .take(preview)
                .map(|b| b.text.as_str())
                .collect::<Vec<_>>()
                .join("\n\n")
        });
        Ok(StepOutput {
            summary: json!({
                "queries": records.len(),
                "head_queries": queries.iter().filter(|q| q.direction == QueryDirection::Head).count(),
                "truncated": records.iter().filter(|r| r.truncated).count(),
                "token_limit": budget.limit(),
                "counter": budget.counter_id(),
                "variant": opts.variant,
                "missing_neighbor_contexts": sum(|w| w.missing_neighbor_contexts),
                "degraded": sum(|w| w.degraded),
                "missing_templates": sum(|w| w.missing_templates),
                "artifact": path,
            }),
            text,
        })
    }

    fn corpus(&self) -> Result<CoverageStats> {
        let ds = self.dataset()?;
        let store = self.load_store()?;
        Ok(corpus_stats(&store, &ds))
    }

    pub fn stats(&self) -> Result<StepOutput> {
        let s = self.corpus()?;
        if !s.chain_holds() {
            log::warn!("context counts break #with-FICHAD-1 <= #with-images <= #entities");
        }
        self.write_json(STATS_FILE, &s)?;
        Ok(StepOutput {
            text: Some(CoverageStats::counts_table(std::slice::from_ref(&s))),
            summary: serde_json::to_value(&s).expect("serializable"),
        })
    }

    pub fn coverage(&self) -> Result<StepOutput> {
        let s = self.corpus()?;
        let summary = json!({
            "dataset": s.dataset,
            "fichad1_contexts": s.fichad1_triples,
            "single_entity_coverage": s.single_entity_coverage,
            "both_entity_coverage": s.both_entity_coverage,
            "entity_coverage": s.entity_coverage,
        });
        self.write_json(COVERAGE_FILE, &summary)?;
        Ok(StepOutput {
            text: Some(CoverageStats::coverage_table(std::slice::from_ref(&s))),
            summary,
        })
    }
}
