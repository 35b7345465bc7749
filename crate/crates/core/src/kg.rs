//! Knowledge graph data model and benchmark file loaders.
//!
//! Entities and relations are interned into dense `u32` handles in
//! first-appearance order. Triple lists keep file order and duplicates; the
//! lookup indices are sets built over all splits.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}:{line}: expected {expected} tab-separated fields, found {found}")]
    Parse {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: unknown {kind} label `{label}` in frozen vocabulary")]
    UnknownLabel {
        path: String,
        line: usize,
        kind: &'static str,
        label: String,
    },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl KgError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        KgError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, KgError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Bijective label <-> dense handle table with optional display names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    labels: Vec<String>,
    names: Vec<Option<String>>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.lookup.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_string());
        self.names.push(None);
        self.lookup.insert(label.to_string(), id);
        id
    }

    pub fn get(&self, label: &str) -> Option<u32> {
        self.lookup.get(label).copied()
    }

    pub fn label(&self, id: u32) -> &str {
        &self.labels[id as usize]
    }

    /// Display name, falling back to the raw label.
    pub fn display(&self, id: u32) -> &str {
        self.names[id as usize]
            .as_deref()
            .unwrap_or(&self.labels[id as usize])
    }

    pub fn set_display(&mut self, id: u32, name: impl Into<String>) {
        self.names[id as usize] = Some(name.into());
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Self {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabMode {
    Build,
    Frozen,
}

/// Edge direction relative to the entity whose neighborhood is queried.
/// `Out` sorts before `In`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Out,
    In,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Neighbor {
    pub relation: RelationId,
    pub entity: EntityId,
    pub direction: Direction,
}

impl Neighbor {
    /// The triple this incident edge stands for, oriented from `center`.
    pub fn triple(&self, center: EntityId) -> Triple {
        match self.direction {
            Direction::Out => Triple {
                head: center,
                relation: self.relation,
                tail: self.entity,
            },
            Direction::In => Triple {
                head: self.entity,
                relation: self.relation,
                tail: center,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub entities: Vocab,
    pub relations: Vocab,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    tails: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
    heads: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
    train_set: HashSet<Triple>,
    adjacency: Vec<Vec<Neighbor>>,
}

impl KnowledgeGraph {
    pub fn new(
        entities: Vocab,
        relations: Vocab,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Self {
        let mut g = Self {
            entities,
            relations,
            train,
            valid,
            test,
            tails: HashMap::new(),
            heads: HashMap::new(),
            train_set: HashSet::new(),
            adjacency: Vec::new(),
        };
        g.rebuild_indices();
        g
    }

    fn rebuild_indices(&mut self) {
        let mut tails: HashMap<_, HashSet<_>> = HashMap::new();
        let mut heads: HashMap<_, HashSet<_>> = HashMap::new();
        for t in self.train.iter().chain(&self.valid).chain(&self.test) {
            tails.entry((t.head, t.relation)).or_default().insert(t.tail);
            heads.entry((t.tail, t.relation)).or_default().insert(t.head);
        }
        self.train_set = self.train.iter().copied().collect();

        // Neighborhoods come from the training split only so that held-out
        // answers never leak into the prompt.
        let mut adjacency = vec![Vec::new(); self.entities.len()];
        for t in &self.train_set {
            adjacency[t.head.index()].push(Neighbor {
                relation: t.relation,
                entity: t.tail,
                direction: Direction::Out,
            });
            adjacency[t.tail.index()].push(Neighbor {
                relation: t.relation,
                entity: t.head,
                direction: Direction::In,
            });
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        self.tails = tails;
        self.heads = heads;
        self.adjacency = adjacency;
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    pub fn is_train_triple(&self, t: &Triple) -> bool {
        self.train_set.contains(t)
    }

    /// True if the triple appears in any split.
    pub fn is_known(&self, t: &Triple) -> bool {
        self.tails
            .get(&(t.head, t.relation))
            .is_some_and(|s| s.contains(&t.tail))
    }

    /// All tails `t` with `(head, relation, t)` in train ∪ valid ∪ test.
    pub fn known_tails(&self, head: EntityId, relation: RelationId) -> Option<&HashSet<EntityId>> {
        self.tails.get(&(head, relation))
    }

    /// All heads `h` with `(h, relation, tail)` in train ∪ valid ∪ test.
    pub fn known_heads(&self, tail: EntityId, relation: RelationId) -> Option<&HashSet<EntityId>> {
        self.heads.get(&(tail, relation))
    }

    /// Deterministic neighborhood: incident training edges sorted by
    /// (relation, neighbor, direction), first `k`.
    pub fn neighbors(&self, entity: EntityId, k: usize) -> &[Neighbor] {
        let all = &self.adjacency[entity.index()];
        &all[..k.min(all.len())]
    }

    pub fn degree(&self, entity: EntityId) -> usize {
        self.adjacency[entity.index()].len()
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        self.entities.label(e.0)
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.entities.display(e.0)
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        self.relations.label(r.0)
    }

    pub fn entity(&self, label: &str) -> Option<EntityId> {
        self.entities.get(label).map(EntityId)
    }

    pub fn relation(&self, label: &str) -> Option<RelationId> {
        self.relations.get(label).map(RelationId)
    }

    /// Writes one split as canonical `head\trelation\ttail\n` lines.
    pub fn write_split<W: Write>(&self, split: Split, mut out: W) -> std::io::Result<()> {
        for t in self.split(split) {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_label(t.head),
                self.relation_label(t.relation),
                self.entity_label(t.tail)
            )?;
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| KgError::io(path, e))
}

/// Reads TAB-separated lines, skipping blank lines. Yields (line number, fields).
fn tsv_lines<'a, R: Read + 'a>(
    reader: R,
    source: &'a str,
    fields: usize,
) -> impl Iterator<Item = Result<(usize, Vec<String>)>> + 'a {
    BufReader::new(reader)
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| {
            let lineno = i + 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(KgError::Io {
                        path: source.to_string(),
                        source: e,
                    }))
                }
            };
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.trim().is_empty() {
                return None;
            }
            let parts: Vec<String> = line.splitn(fields + 1, '\t').map(str::to_string).collect();
            if parts.len() != fields {
                return Some(Err(KgError::Parse {
                    path: source.to_string(),
                    line: lineno,
                    expected: fields,
                    found: if parts.len() > fields {
                        line.split('\t').count()
                    } else {
                        parts.len()
                    },
                }));
            }
            Some(Ok((lineno, parts)))
        })
}

pub fn read_triples<R: Read>(
    reader: R,
    source: &str,
    entities: &mut Vocab,
    relations: &mut Vocab,
    mode: VocabMode,
) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for row in tsv_lines(reader, source, 3) {
        let (line, f) = row?;
        let lookup = |vocab: &mut Vocab, label: &str, kind: &'static str| -> Result<u32> {
            match mode {
                VocabMode::Build => Ok(vocab.intern(label)),
                VocabMode::Frozen => vocab.get(label).ok_or_else(|| KgError::UnknownLabel {
                    path: source.to_string(),
                    line,
                    kind,
                    label: label.to_string(),
                }),
            }
        };
        let h = lookup(entities, &f[0], "entity")?;
        let r = lookup(relations, &f[1], "relation")?;
        let t = lookup(entities, &f[2], "entity")?;
        out.push(Triple::new(h, r, t));
    }
    Ok(out)
}

pub fn load_triples(
    path: &Path,
    entities: &mut Vocab,
    relations: &mut Vocab,
    mode: VocabMode,
) -> Result<Vec<Triple>> {
    read_triples(
        open(path)?,
        &path.display().to_string(),
        entities,
        relations,
        mode,
    )
}

/// Per-entity ordered image references, capped at load time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageManifest {
    pub images: Vec<Vec<String>>,
    pub cap: usize,
    pub skipped_unknown: usize,
    pub truncated: usize,
}

impl ImageManifest {
    pub fn empty(num_entities: usize, cap: usize) -> Self {
        Self {
            images: vec![Vec::new(); num_entities],
            cap,
            ..Default::default()
        }
    }
}

pub fn read_image_manifest<R: Read>(
    reader: R,
    source: &str,
    entities: &Vocab,
    cap: usize,
) -> Result<ImageManifest> {
    if cap == 0 {
        return Err(KgError::Config("image cap must be at least 1".into()));
    }
    let mut manifest = ImageManifest::empty(entities.len(), cap);
    for row in tsv_lines(reader, source, 2) {
        let (line, f) = row?;
        let Some(id) = entities.get(&f[0]) else {
            log::warn!("{source}:{line}: image for unknown entity `{}` skipped", f[0]);
            manifest.skipped_unknown += 1;
            continue;
        };
        let list = &mut manifest.images[id as usize];
        if list.len() < cap {
            list.push(f[1].clone());
        } else {
            manifest.truncated += 1;
        }
    }
    Ok(manifest)
}

pub fn load_image_manifest(path: &Path, entities: &Vocab, cap: usize) -> Result<ImageManifest> {
    read_image_manifest(open(path)?, &path.display().to_string(), entities, cap)
}

/// Human-annotated entity descriptions. Partial by nature.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Descriptions {
    text: HashMap<EntityId, String>,
    pub duplicates: usize,
    pub skipped_unknown: usize,
}

impl Descriptions {
    pub fn get(&self, entity: EntityId) -> Option<&str> {
        self.text.get(&entity).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

pub fn read_descriptions<R: Read>(
    reader: R,
    source: &str,
    entities: &Vocab,
) -> Result<Descriptions> {
    let mut out = Descriptions::default();
    for row in tsv_lines(reader, source, 2) {
        let (line, f) = row?;
        let Some(id) = entities.get(&f[0]) else {
            out.skipped_unknown += 1;
            continue;
        };
        if out.text.insert(EntityId(id), f[1].clone()).is_some() {
            log::warn!("{source}:{line}: duplicate description for `{}`, keeping the last", f[0]);
            out.duplicates += 1;
        }
    }
    Ok(out)
}

pub fn load_descriptions(path: &Path, entities: &Vocab) -> Result<Descriptions> {
    read_descriptions(open(path)?, &path.display().to_string(), entities)
}

/// Text up to and including the first period followed by a space or
/// newline; the whole (right-trimmed) text when there is no such boundary.
pub fn first_sentence(text: &str) -> &str {
    let bytes = text.as_bytes();
    for i in 0..bytes.len() {
        if bytes[i] == b'.' && matches!(bytes.get(i + 1), Some(b' ') | Some(b'\n')) {
            return &text[..=i];
        }
    }
    text.trim_end()
}

/// `dataset.json`: names the split files, the image manifest, the
/// description file and the image cap. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub id: String,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<PathBuf>,
    /// Optional `label<TAB>display name` file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<PathBuf>,
    pub image_cap: usize,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| KgError::io(path, e))?;
        let mut cfg: DatasetConfig =
            serde_json::from_str(&raw).map_err(|e| KgError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.image_cap == 0 {
            return Err(KgError::Config("image_cap must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// A loaded benchmark: structure plus multimodal assets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub graph: KnowledgeGraph,
    pub images: ImageManifest,
    pub descriptions: Option<Descriptions>,
}

impl Dataset {
    pub fn load(config: &DatasetConfig) -> Result<Self> {
        let mut entities = Vocab::new();
        let mut relations = Vocab::new();
        let mut split = |p: &Path| {
            load_triples(&config.resolve(p), &mut entities, &mut relations, VocabMode::Build)
        };
        let train = split(&config.train)?;
        let valid = split(&config.valid)?;
        let test = split(&config.test)?;

        if let Some(names) = &config.names {
            let path = config.resolve(names);
            for row in tsv_lines(open(&path)?, &path.display().to_string(), 2) {
                let (_, f) = row?;
                if let Some(id) = entities.get(&f[0]) {
                    entities.set_display(id, f[1].clone());
                }
            }
        }

        let images = match &config.images {
            Some(p) => load_image_manifest(&config.resolve(p), &entities, config.image_cap)?,
            None => ImageManifest::empty(entities.len(), config.image_cap),
        };
        let descriptions = match &config.descriptions {
            Some(p) => Some(load_descriptions(&config.resolve(p), &entities)?),
            None => None,
        };
        Ok(Self {
            id: config.id.clone(),
            graph: KnowledgeGraph::new(entities, relations, train, valid, test),
            images,
            descriptions,
        })
    }

    pub fn images(&self, e: EntityId) -> &[String] {
        &self.images.images[e.index()]
    }

    pub fn description(&self, e: EntityId) -> Option<&str> {
        self.descriptions.as_ref().and_then(|d| d.get(e))
    }
}
