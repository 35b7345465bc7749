//! Structure-only embedding baselines: TransE, DistMult, ComplEx and RotatE.
//!
//! All four families share one contract: `score(h, r, t)` where higher means
//! more plausible. Complex-valued rows are stored as `[re_0..re_d, im_0..im_d]`;
//! RotatE relations are `d` phases kept in `[-π, π)`.
//!
//! Training is plain mini-batch SGD over uniformly corrupted negatives with
//! hand-derived gradients (checked against finite differences in the test
//! suites).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("non-finite parameter after epoch {epoch}, batch {batch} ({table} row {row})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        table: &'static str,
        row: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    TransE,
    DistMult,
    ComplEx,
    RotatE,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::TransE, Family::DistMult, Family::ComplEx, Family::RotatE];

    pub fn default_loss(self) -> Loss {
        match self {
            Family::TransE | Family::RotatE => Loss::MarginRanking,
            Family::DistMult | Family::ComplEx => Loss::Logistic,
        }
    }

    fn code(self) -> u8 {
        match self {
            Family::TransE => 0,
            Family::DistMult => 1,
            Family::ComplEx => 2,
            Family::RotatE => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    fn is_complex(self) -> bool {
        matches!(self, Family::ComplEx | Family::RotatE)
    }
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(Family::TransE),
            "distmult" => Ok(Family::DistMult),
            "complex" => Ok(Family::ComplEx),
            "rotate" => Ok(Family::RotatE),
            other => Err(format!("unknown model family `{other}`")),
        }
    }
}

/// Distance used by TransE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// `Σ_j max(0, γ − s(pos) + s(neg_j))`
    MarginRanking,
    /// `softplus(−s(pos)) + mean_j softplus(s(neg_j))`
    Logistic,
}

/// Loss configuration shared by training and the gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub loss: Loss,
    pub margin: f64,
    /// Coefficient of `‖e_h‖² + ‖e_r‖² + ‖e_t‖²`, summed over every triple
    /// of the sample.
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: Family,
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub margin: f64,
    /// `None` picks the family default (margin ranking for TransE/RotatE,
    /// logistic for DistMult/ComplEx).
    #[serde(default)]
    pub loss: Option<Loss>,
    pub l2: f64,
    pub seed: u64,
    #[serde(default)]
    pub norm: Norm,
    /// TransE only: project the entity rows a batch touches onto the unit
    /// sphere before computing its gradients.
    #[serde(default = "default_true")]
    pub normalize_entities: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(family: Family) -> Self {
        let (lr, l2) = match family {
            Family::TransE | Family::RotatE => (0.01, 0.0),
            Family::DistMult | Family::ComplEx => (0.1, 1e-4),
        };
        Self {
            family,
            dim: 50,
            epochs: 100,
            learning_rate: lr,
            batch_size: 128,
            negatives: 1,
            margin: if family == Family::RotatE { 6.0 } else { 1.0 },
            loss: None,
            l2,
            seed: 0,
            norm: Norm::L1,
            normalize_entities: true,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            loss: self.loss.unwrap_or(self.family.default_loss()),
            margin: self.margin,
            l2: self.l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EmbedError::Config(m.to_string()));
        if self.dim < 1 {
            return bad("dimension must be at least 1");
        }
        if self.negatives < 1 {
            return bad("negatives per positive must be at least 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning rate must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if !self.margin.is_finite() || self.l2.is_nan() || self.l2 < 0.0 {
            return bad("margin must be finite and l2 non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub family: Family,
    pub dim: usize,
    pub gamma: f64,
    pub norm: Norm,
    pub seed: u64,
    num_entities: usize,
    num_relations: usize,
    entity: Vec<f64>,
    relation: Vec<f64>,
}

/// Gradient rows for the embeddings a sample touches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub entity: BTreeMap<EntityId, Vec<f64>>,
    pub relation: BTreeMap<RelationId, Vec<f64>>,
}

/// A positive triple with its corruptions.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub positive: Triple,
    pub negatives: Vec<Triple>,
}

fn wrap_phase(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π
    if y >= PI {
        -PI
    } else {
        y
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl EmbeddingModel {
    /// Seeded uniform initialization: coordinates in `±6/√d`, RotatE phases
    /// in `[-π, π)`.
    pub fn init(
        family: Family,
        dim: usize,
        gamma: f64,
        num_entities: usize,
        num_relations: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(family, dim, gamma, num_entities, num_relations, seed, &mut rng)
    }

    fn init_with(
        family: Family,
        dim: usize,
        gamma: f64,
        num_entities: usize,
        num_relations: usize,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 6.0 / (dim as f64).sqrt();
        let mut m = Self {
            family,
            dim,
            gamma,
            norm: Norm::L1,
            seed,
            num_entities,
            num_relations,
            entity: Vec::new(),
            relation: Vec::new(),
        };
        m.entity = (0..num_entities * m.entity_width())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        m.relation = (0..num_relations * m.relation_width())
            .map(|_| {
                if family == Family::RotatE {
                    rng.random_range(-PI..PI)
                } else {
                    rng.random_range(-bound..bound)
                }
            })
            .collect();
        m
    }

    /// Builds a model from explicit parameter blocks (row-major).
    pub fn from_parts(
        family: Family,
        dim: usize,
        gamma: f64,
        entity: Vec<f64>,
        relation: Vec<f64>,
    ) -> Self {
        let mut m = Self {
            family,
            dim,
            gamma,
            norm: Norm::L1,
            seed: 0,
            num_entities: 0,
            num_relations: 0,
            entity,
            relation,
        };
        assert_eq!(m.entity.len() % m.entity_width(), 0, "entity block size");
        assert_eq!(m.relation.len() % m.relation_width(), 0, "relation block size");
        m.num_entities = m.entity.len() / m.entity_width();
        m.num_relations = m.relation.len() / m.relation_width();
        m
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn entity_width(&self) -> usize {
        if self.family.is_complex() {
            2 * self.dim
        } else {
            self.dim
        }
    }

    pub fn relation_width(&self) -> usize {
        if self.family == Family::ComplEx {
            2 * self.dim
        } else {
            self.dim
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn entity_row(&self, e: EntityId) -> &[f64] {
        let w = self.entity_width();
        &self.entity[e.index() * w..(e.index() + 1) * w]
    }

    pub fn relation_row(&self, r: RelationId) -> &[f64] {
        let w = self.relation_width();
        &self.relation[r.index() * w..(r.index() + 1) * w]
    }

    pub fn entity_row_mut(&mut self, e: EntityId) -> &mut [f64] {
        let w = self.entity_width();
        &mut self.entity[e.index() * w..(e.index() + 1) * w]
    }

    pub fn relation_row_mut(&mut self, r: RelationId) -> &mut [f64] {
        let w = self.relation_width();
        &mut self.relation[r.index() * w..(r.index() + 1) * w]
    }

    pub fn entity_params(&self) -> &[f64] {
        &self.entity
    }

    pub fn relation_params(&self) -> &[f64] {
        &self.relation
    }

    pub fn is_finite(&self) -> bool {
        self.entity.iter().chain(&self.relation).all(|x| x.is_finite())
    }

    pub fn score(&self, t: Triple) -> f64 {
        self.score_rows(
            self.entity_row(t.head),
            self.relation_row(t.relation),
            self.entity_row(t.tail),
        )
    }

    pub fn score_rows(&self, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
        let d = self.dim;
        match self.family {
            Family::TransE => {
                let it = h.iter().zip(r).zip(t).map(|((h, r), t)| h + r - t);
                match self.norm {
                    Norm::L1 => -it.map(f64::abs).sum::<f64>(),
                    Norm::L2 => -it.map(|x| x * x).sum::<f64>().sqrt(),
                }
            }
            Family::DistMult => h.iter().zip(r).zip(t).map(|((h, r), t)| h * r * t).sum(),
            Family::ComplEx => (0..d)
                .map(|i| {
                    let (a, b) = (h[i], h[d + i]);
                    let (c, dd) = (r[i], r[d + i]);
                    let (e, f) = (t[i], t[d + i]);
                    (a * c - b * dd) * e + (a * dd + b * c) * f
                })
                .sum(),
            Family::RotatE => {
                let sq: f64 = (0..d)
                    .map(|i| {
                        let (a, b) = (h[i], h[d + i]);
                        let (s, c) = r[i].sin_cos();
                        let u = a * c - b * s - t[i];
                        let v = a * s + b * c - t[d + i];
                        u * u + v * v
                    })
                    .sum();
                self.gamma - sq.sqrt()
            }
        }
    }

    /// Accumulates `coef · ∂score/∂(h, r, t)` into the given buffers.
    #[allow(clippy::too_many_arguments)]
    fn score_grad_rows(
        &self,
        h: &[f64],
        r: &[f64],
        t: &[f64],
        coef: f64,
        gh: &mut [f64],
        gr: &mut [f64],
        gt: &mut [f64],
    ) {
        let d = self.dim;
        match self.family {
            Family::TransE => match self.norm {
                Norm::L1 => {
                    for i in 0..d {
                        let s = sign(h[i] + r[i] - t[i]) * coef;
                        gh[i] -= s;
                        gr[i] -= s;
                        gt[i] += s;
                    }
                }
                Norm::L2 => {
                    let x: Vec<f64> = (0..d).map(|i| h[i] + r[i] - t[i]).collect();
                    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        for i in 0..d {
                            let g = x[i] / n * coef;
                            gh[i] -= g;
                            gr[i] -= g;
                            gt[i] += g;
                        }
                    }
                }
            },
            Family::DistMult => {
                for i in 0..d {
                    gh[i] += coef * r[i] * t[i];
                    gr[i] += coef * h[i] * t[i];
                    gt[i] += coef * h[i] * r[i];
                }
            }
            Family::ComplEx => {
                for i in 0..d {
                    let (a, b) = (h[i], h[d + i]);
                    let (c, dd) = (r[i], r[d + i]);
                    let (e, f) = (t[i], t[d + i]);
                    gh[i] += coef * (c * e + dd * f);
                    gh[d + i] += coef * (c * f - dd * e);
                    gr[i] += coef * (a * e + b * f);
                    gr[d + i] += coef * (a * f - b * e);
                    gt[i] += coef * (a * c - b * dd);
                    gt[d + i] += coef * (a * dd + b * c);
                }
            }
            Family::RotatE => {
                let mut parts = Vec::with_capacity(d);
                let mut sq = 0.0;
                for i in 0..d {
                    let (a, b) = (h[i], h[d + i]);
                    let (s, c) = r[i].sin_cos();
                    let u = a * c - b * s - t[i];
                    let v = a * s + b * c - t[d + i];
                    sq += u * u + v * v;
                    parts.push((a, b, s, c, u, v));
                }
                let dist = sq.sqrt();
                if dist == 0.0 {
                    return;
                }
                // score = γ − dist, so ∂score = −∂dist
                let k = coef / dist;
                for (i, &(a, b, s, c, u, v)) in parts.iter().enumerate() {
                    gh[i] -= k * (u * c + v * s);
                    gh[d + i] -= k * (-u * s + v * c);
                    gr[i] -= k * (u * (-a * s - b * c) + v * (a * c - b * s));
                    gt[i] += k * u;
                    gt[d + i] += k * v;
                }
            }
        }
    }

    fn add_triple_grad(&self, t: Triple, coef: f64, l2: f64, grads: &mut Gradients) {
        let (ew, rw) = (self.entity_width(), self.relation_width());
        let h = self.entity_row(t.head);
        let r = self.relation_row(t.relation);
        let tt = self.entity_row(t.tail);
        let mut gh = vec![0.0; ew];
        let mut gr = vec![0.0; rw];
        let mut gt = vec![0.0; ew];
        self.score_grad_rows(h, r, tt, coef, &mut gh, &mut gr, &mut gt);
        if l2 > 0.0 {
            for (g, x) in gh.iter_mut().zip(h) {
                *g += 2.0 * l2 * x;
            }
            for (g, x) in gr.iter_mut().zip(r) {
                *g += 2.0 * l2 * x;
            }
            for (g, x) in gt.iter_mut().zip(tt) {
                *g += 2.0 * l2 * x;
            }
        }
        let add = |map: &mut BTreeMap<EntityId, Vec<f64>>, id: EntityId, g: Vec<f64>| {
            map.entry(id)
                .and_modify(|acc: &mut Vec<f64>| acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b))
                .or_insert(g);
        };
        add(&mut grads.entity, t.head, gh);
        add(&mut grads.entity, t.tail, gt);
        grads
            .relation
            .entry(t.relation)
            .and_modify(|acc| acc.iter_mut().zip(&gr).for_each(|(a, b)| *a += b))
            .or_insert(gr);
    }

    fn l2_term(&self, t: Triple) -> f64 {
        let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
        sq(self.entity_row(t.head)) + sq(self.relation_row(t.relation)) + sq(self.entity_row(t.tail))
    }

    /// Loss of one sample under `obj`.
    pub fn loss(&self, sample: &Sample, obj: &Objective) -> f64 {
        let sp = self.score(sample.positive);
        let mut total = match obj.loss {
            Loss::MarginRanking => sample
                .negatives
                .iter()
                .map(|n| (obj.margin - sp + self.score(*n)).max(0.0))
                .sum(),
            Loss::Logistic => {
                let neg = if sample.negatives.is_empty() {
                    0.0
                } else {
                    sample.negatives.iter().map(|n| softplus(self.score(*n))).sum::<f64>()
                        / sample.negatives.len() as f64
                };
                softplus(-sp) + neg
            }
        };
        if obj.l2 > 0.0 {
            total += obj.l2
                * std::iter::once(&sample.positive)
                    .chain(&sample.negatives)
                    .map(|t| self.l2_term(*t))
                    .sum::<f64>();
        }
        total
    }

    /// Loss and its gradient with respect to every embedding row the sample
    /// touches. The hinge and L1 kinks take subgradient 0.
    pub fn gradients(&self, sample: &Sample, obj: &Objective) -> (f64, Gradients) {
        let mut g = Gradients::default();
        let sp = self.score(sample.positive);
        let mut loss = 0.0;
        let mut pos_coef = 0.0;
        match obj.loss {
            Loss::MarginRanking => {
                for n in &sample.negatives {
                    let v = obj.margin - sp + self.score(*n);
                    if v > 0.0 {
                        loss += v;
                        pos_coef -= 1.0;
                        self.add_triple_grad(*n, 1.0, 0.0, &mut g);
                    }
                }
            }
            Loss::Logistic => {
                loss += softplus(-sp);
                pos_coef = -sigmoid(-sp);
                if !sample.negatives.is_empty() {
                    let inv = 1.0 / sample.negatives.len() as f64;
                    for n in &sample.negatives {
                        let sn = self.score(*n);
                        loss += inv * softplus(sn);
                        self.add_triple_grad(*n, inv * sigmoid(sn), 0.0, &mut g);
                    }
                }
            }
        }
        self.add_triple_grad(sample.positive, pos_coef, 0.0, &mut g);
        if obj.l2 > 0.0 {
            for t in std::iter::once(&sample.positive).chain(&sample.negatives) {
                loss += obj.l2 * self.l2_term(*t);
                self.add_triple_grad(*t, 0.0, obj.l2, &mut g);
            }
        }
        (loss, g)
    }

    fn apply(&mut self, grads: &Gradients, step: f64) {
        for (e, g) in &grads.entity {
            for (p, d) in self.entity_row_mut(*e).iter_mut().zip(g) {
                *p -= step * d;
            }
        }
        let rotate = self.family == Family::RotatE;
        for (r, g) in &grads.relation {
            for (p, d) in self.relation_row_mut(*r).iter_mut().zip(g) {
                *p -= step * d;
                if rotate {
                    *p = wrap_phase(*p);
                }
            }
        }
    }

    fn normalize_entity(&mut self, e: EntityId) {
        let row = self.entity_row_mut(e);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }

    fn check_finite(&self, grads: &Gradients, epoch: usize, batch: usize) -> Result<()> {
        for e in grads.entity.keys() {
            if !self.entity_row(*e).iter().all(|x| x.is_finite()) {
                return Err(EmbedError::NonFinite {
                    epoch,
                    batch,
                    table: "entity",
                    row: e.index(),
                });
            }
        }
        for r in grads.relation.keys() {
            if !self.relation_row(*r).iter().all(|x| x.is_finite()) {
                return Err(EmbedError::NonFinite {
                    epoch,
                    batch,
                    table: "relation",
                    row: r.index(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        self.write_to(&mut f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Checkpoint layout (little-endian): magic, version u32, family u8,
    /// norm u8, dim u32, gamma f64, #entities u64, #relations u64, seed u64,
    /// then the entity and relation blocks as f64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[self.family.code(), matches!(self.norm, Norm::L2) as u8])?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.gamma.to_le_bytes())?;
        w.write_all(&(self.num_entities as u64).to_le_bytes())?;
        w.write_all(&(self.num_relations as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut buf = Vec::with_capacity((self.entity.len() + self.relation.len()) * 8);
        for x in self.entity.iter().chain(&self.relation) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: &str| EmbedError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(EmbedError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let family = Family::from_code(b2[0]).ok_or_else(|| bad("unknown family code"))?;
        let norm = if b2[1] == 1 { Norm::L2 } else { Norm::L1 };
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let gamma = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let ne = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let nr = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        if dim == 0 {
            return Err(bad("zero dimension"));
        }
        let mut m = Self {
            family,
            dim,
            gamma,
            norm,
            seed,
            num_entities: ne,
            num_relations: nr,
            entity: Vec::new(),
            relation: Vec::new(),
        };
        let mut read_block = |n: usize| -> Result<Vec<f64>> {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(|_| bad("truncated parameter block"))?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        m.entity = read_block(ne * m.entity_width())?;
        m.relation = read_block(nr * m.relation_width())?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after parameter block"));
        }
        Ok(m)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FICHADKE";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RESAMPLE: usize = 100;

/// `n` corruptions of `triple`: a fair coin picks head or tail, which is
/// replaced by a uniform entity, redrawn while the corruption is a training
/// triple. After 100 redraws the last candidate is accepted as is.
pub fn negative_sample<R: Rng + ?Sized>(
    triple: Triple,
    graph: &KnowledgeGraph,
    rng: &mut R,
    n: usize,
) -> Vec<Triple> {
    let ne = graph.num_entities() as u32;
    (0..n)
        .map(|_| {
            let corrupt_head = rng.random_bool(0.5);
            let draw = |rng: &mut R| {
                let e = EntityId(rng.random_range(0..ne));
                if corrupt_head {
                    Triple { head: e, ..triple }
                } else {
                    Triple { tail: e, ..triple }
                }
            };
            let mut cand = draw(rng);
            for _ in 0..MAX_RESAMPLE {
                if !graph.is_train_triple(&cand) {
                    break;
                }
                cand = draw(rng);
            }
            cand
        })
        .collect()
}

/// Per-epoch mean training loss, for logging.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

pub fn train(config: &TrainConfig, graph: &KnowledgeGraph) -> Result<EmbeddingModel> {
    train_logged(config, graph).map(|(m, _)| m)
}

pub fn train_logged(config: &TrainConfig, graph: &KnowledgeGraph) -> Result<(EmbeddingModel, TrainLog)> {
    config.validate()?;
    if graph.train().is_empty() {
        return Err(EmbedError::EmptyTrainSplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = EmbeddingModel::init_with(
        config.family,
        config.dim,
        config.margin,
        graph.num_entities(),
        graph.num_relations(),
        config.seed,
        &mut rng,
    )
    .with_norm(config.norm);
    let obj = config.objective();
    let mut order: Vec<usize> = (0..graph.train().len()).collect();
    let mut log = TrainLog::default();
    let normalize = config.family == Family::TransE && config.normalize_entities;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let positive = graph.train()[i];
                    Sample {
                        positive,
                        negatives: negative_sample(positive, graph, &mut rng, config.negatives),
                    }
                })
                .collect();
            if normalize {
                for s in &samples {
                    for t in std::iter::once(&s.positive).chain(&s.negatives) {
                        model.normalize_entity(t.head);
                        model.normalize_entity(t.tail);
                    }
                }
            }
            let mut batch = Gradients::default();
            for s in &samples {
                let (l, g) = model.gradients(s, &obj);
                epoch_loss += l;
                merge(&mut batch, g);
            }
            model.apply(&batch, config.learning_rate / samples.len() as f64);
            model.check_finite(&batch, epoch, bi)?;
        }
        let mean = epoch_loss / order.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        log.epoch_loss.push(mean);
    }
    Ok((model, log))
}

fn merge(acc: &mut Gradients, g: Gradients) {
    for (k, v) in g.entity {
        acc.entity
            .entry(k)
            .and_modify(|a| a.iter_mut().zip(&v).for_each(|(x, y)| *x += y))
            .or_insert(v);
    }
    for (k, v) in g.relation {
        acc.relation
            .entry(k)
            .and_modify(|a| a.iter_mut().zip(&v).for_each(|(x, y)| *x += y))
            .or_insert(v);
    }
}
