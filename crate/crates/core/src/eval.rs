//! Filtered link-prediction evaluation.
//!
//! Every evaluated triple yields a tail query `(h, r, ?)` and a head query
//! `(?, r, t)`. Candidates are all entities minus the other known answers in
//! train ∪ valid ∪ test. Ties take the mean rank.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingModel;
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Split, Triple};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("split {0:?} has no triples to evaluate")]
    EmptySplit(Split),
    #[error("true entity {0} missing from the scored candidates")]
    MissingTrueEntity(EntityId),
    #[error("scores and candidates differ in length ({scores} vs {candidates})")]
    LengthMismatch { scores: usize, candidates: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryDirection {
    /// `(h, r, ?)`
    Tail,
    /// `(?, r, t)`
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Query {
    pub direction: QueryDirection,
    pub known: EntityId,
    pub relation: RelationId,
    pub answer: EntityId,
}

impl Query {
    pub fn tail(t: Triple) -> Self {
        Self {
            direction: QueryDirection::Tail,
            known: t.head,
            relation: t.relation,
            answer: t.tail,
        }
    }

    pub fn head(t: Triple) -> Self {
        Self {
            direction: QueryDirection::Head,
            known: t.tail,
            relation: t.relation,
            answer: t.head,
        }
    }

    /// The triple obtained by placing `candidate` in the missing slot.
    pub fn complete(&self, candidate: EntityId) -> Triple {
        match self.direction {
            QueryDirection::Tail => Triple {
                head: self.known,
                relation: self.relation,
                tail: candidate,
            },
            QueryDirection::Head => Triple {
                head: candidate,
                relation: self.relation,
                tail: self.known,
            },
        }
    }

    pub fn triple(&self) -> Triple {
        self.complete(self.answer)
    }

    /// `(head, relation, ?)` or `(?, relation, tail)` with display names.
    pub fn display(&self, graph: &KnowledgeGraph) -> String {
        let known = graph.entity_name(self.known);
        let rel = graph.relation_label(self.relation);
        match self.direction {
            QueryDirection::Tail => format!("({known}, {rel}, ?)"),
            QueryDirection::Head => format!("(?, {rel}, {known})"),
        }
    }
}

/// Entities ranked for `query`, ascending by handle.
pub fn filtered_candidates(graph: &KnowledgeGraph, query: &Query) -> Vec<EntityId> {
    let known = match query.direction {
        QueryDirection::Tail => graph.known_tails(query.known, query.relation),
        QueryDirection::Head => graph.known_heads(query.known, query.relation),
    };
    (0..graph.num_entities() as u32)
        .map(EntityId)
        .filter(|e| *e == query.answer || !known.is_some_and(|s| s.contains(e)))
        .collect()
}

/// `1 + #{greater} + #{equal, excluding the true entity} / 2`.
pub fn rank(candidates: &[EntityId], scores: &[f64], truth: EntityId) -> Result<f64, EvalError> {
    if candidates.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            candidates: candidates.len(),
        });
    }
    let pos = candidates
        .iter()
        .position(|e| *e == truth)
        .ok_or(EvalError::MissingTrueEntity(truth))?;
    Ok(rank_at(scores, pos))
}

fn rank_at(scores: &[f64], pos: usize) -> f64 {
    let s = scores[pos];
    let mut greater = 0usize;
    let mut equal = 0usize;
    for (i, &x) in scores.iter().enumerate() {
        if x > s {
            greater += 1;
        } else if x == s && i != pos {
            equal += 1;
        }
    }
    1.0 + greater as f64 + equal as f64 / 2.0
}

/// Anything that assigns a plausibility score to triples.
pub trait Scorer: Sync {
    fn score(&self, triple: Triple) -> f64;

    /// Scores `query` completed with each candidate, in order.
    fn score_candidates(&self, query: &Query, candidates: &[EntityId], out: &mut Vec<f64>) {
        out.clear();
        out.extend(candidates.iter().map(|&c| self.score(query.complete(c))));
    }
}

impl<F: Fn(Triple) -> f64 + Sync> Scorer for F {
    fn score(&self, triple: Triple) -> f64 {
        self(triple)
    }
}

impl Scorer for EmbeddingModel {
    fn score(&self, triple: Triple) -> f64 {
        EmbeddingModel::score(self, triple)
    }

    fn score_candidates(&self, query: &Query, candidates: &[EntityId], out: &mut Vec<f64>) {
        out.clear();
        let r = self.relation_row(query.relation);
        let k = self.entity_row(query.known);
        out.extend(candidates.iter().map(|&c| {
            let e = self.entity_row(c);
            match query.direction {
                QueryDirection::Tail => self.score_rows(k, r, e),
                QueryDirection::Head => self.score_rows(e, r, k),
            }
        }));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n_queries: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[f64]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return Self {
                mrr: 0.0,
                hits1: 0.0,
                hits3: 0.0,
                hits10: 0.0,
                n_queries: 0,
            };
        }
        let nf = n as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / nf;
        Self {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / nf,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
            n_queries: n,
        }
    }
}

/// JSON shape: `{"mrr","hits1","hits3","hits10","head":{..},"tail":{..},"n_queries"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub head: Metrics,
    pub tail: Metrics,
    pub n_queries: usize,
}

impl EvalReport {
    /// Equal-weight average of the two directions.
    pub fn from_directions(head: Metrics, tail: Metrics) -> Self {
        let avg = |a: f64, b: f64| (a + b) / 2.0;
        Self {
            mrr: avg(head.mrr, tail.mrr),
            hits1: avg(head.hits1, tail.hits1),
            hits3: avg(head.hits3, tail.hits3),
            hits10: avg(head.hits10, tail.hits10),
            head,
            tail,
            n_queries: head.n_queries + tail.n_queries,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>8} {:>8} {:>8} {:>8} {:>9}", "", "MRR", "Hits@1", "Hits@3", "Hits@10", "queries")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, m: &Metrics| {
            writeln!(
                f,
                "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9}",
                name, m.mrr, m.hits1, m.hits3, m.hits10, m.n_queries
            )
        };
        row(f, "head", &self.head)?;
        row(f, "tail", &self.tail)?;
        row(
            f,
            "both",
            &Metrics {
                mrr: self.mrr,
                hits1: self.hits1,
                hits3: self.hits3,
                hits10: self.hits10,
                n_queries: self.n_queries,
            },
        )
    }
}

/// Filtered rank of every query, in input order.
pub fn query_ranks<S: Scorer + ?Sized>(scorer: &S, graph: &KnowledgeGraph, queries: &[Query]) -> Vec<f64> {
    queries
        .par_iter()
        .map_init(Vec::new, |buf, q| {
            let cands = filtered_candidates(graph, q);
            scorer.score_candidates(q, &cands, buf);
            let pos = cands.binary_search(&q.answer).expect("answer is always a candidate");
            rank_at(buf, pos)
        })
        .collect()
}

pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, graph: &KnowledgeGraph, split: Split) -> Result<EvalReport, EvalError> {
    let triples = graph.split(split);
    if triples.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let heads: Vec<Query> = triples.iter().map(|t| Query::head(*t)).collect();
    let tails: Vec<Query> = triples.iter().map(|t| Query::tail(*t)).collect();
    let head = Metrics::from_ranks(&query_ranks(scorer, graph, &heads));
    let tail = Metrics::from_ranks(&query_ranks(scorer, graph, &tails));
    Ok(EvalReport::from_directions(head, tail))
}
