use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ContextStore, Subject, Variant};
use crate::kg::Dataset;

/// Case-insensitive substring match of an entity's display name.
pub fn names_entity(text: &str, name: &str) -> bool {
    !name.is_empty() && text.to_lowercase().contains(&name.to_lowercase())
}

/// Context counts and name-coverage rates for one dataset. Fallback
/// contexts are excluded from every `fichad1_*`/coverage figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub dataset: String,
    pub entities: usize,
    pub with_images: usize,
    /// Entities touched by at least one grounded link-aware context.
    pub with_fichad1: usize,
    pub with_fichad2: usize,
    /// Grounded link-aware contexts (triples).
    pub fichad1_triples: usize,
    pub fichad1_fallbacks: usize,
    pub fichad2_fallbacks: usize,
    /// Share of grounded link-aware contexts naming at least one endpoint.
    pub single_entity_coverage: f64,
    /// Share naming both endpoints.
    pub both_entity_coverage: f64,
    /// Share of grounded summaries naming their entity.
    pub entity_coverage: f64,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn corpus_stats(store: &ContextStore, dataset: &Dataset) -> CoverageStats {
    let g = &dataset.graph;
    fn display<'a>(g: &'a crate::kg::KnowledgeGraph, label: &'a str) -> &'a str {
        g.entity(label).map(|e| g.entity_name(e)).unwrap_or(label)
    }
    let name = |label| display(g, label);
    let mut with1: HashSet<&str> = HashSet::new();
    let mut with2: HashSet<&str> = HashSet::new();
    let (mut triples, mut fb1, mut fb2) = (0, 0, 0);
    let (mut single, mut both) = (0, 0);
    let (mut summaries, mut named) = (0, 0);
    for c in store.contexts() {
        match (&c.variant, &c.subject) {
            (Variant::Fichad1, Subject::Triple { head, tail, .. }) => {
                if c.fallback {
                    fb1 += 1;
                    continue;
                }
                triples += 1;
                with1.insert(head);
                with1.insert(tail);
                let (a, b) = (names_entity(&c.text, name(head)), names_entity(&c.text, name(tail)));
                single += usize::from(a || b);
                both += usize::from(a && b);
            }
            (Variant::Fichad2, Subject::Entity { entity }) => {
                if c.fallback {
                    fb2 += 1;
                    continue;
                }
                summaries += 1;
                with2.insert(entity);
                named += usize::from(names_entity(&c.text, name(entity)));
            }
            _ => {}
        }
    }
    let known = |s: &HashSet<&str>| s.iter().filter(|l| g.entity(l).is_some()).count();
    CoverageStats {
        dataset: dataset.id.clone(),
        entities: g.num_entities(),
        with_images: dataset.images.images.iter().filter(|v| !v.is_empty()).count(),
        with_fichad1: known(&with1),
        with_fichad2: known(&with2),
        fichad1_triples: triples,
        fichad1_fallbacks: fb1,
        fichad2_fallbacks: fb2,
        single_entity_coverage: rate(single, triples),
        both_entity_coverage: rate(both, triples),
        entity_coverage: rate(named, summaries),
    }
}

impl CoverageStats {
    /// `#with-FICHAD-1 ≤ #with-images ≤ #entities`.
    pub fn chain_holds(&self) -> bool {
        self.with_fichad1 <= self.with_images && self.with_images <= self.entities
    }

    fn name_width(rows: &[CoverageStats]) -> usize {
        rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max("Dataset".len())
    }

    /// Entity counts per dataset.
    pub fn counts_table(rows: &[CoverageStats]) -> String {
        let w = Self::name_width(rows);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>9}  {:>29}", "", "", "#Entity with");
        let _ = writeln!(
            s,
            "{:<w$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}",
            "Dataset", "#Entity", "Images", "FICHAD-1", "FICHAD-2", "#Triples"
        );
        for r in rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}",
                r.dataset, r.entities, r.with_images, r.with_fichad1, r.with_fichad2, r.fichad1_triples
            );
        }
        s
    }

    /// Name-coverage rates per dataset.
    pub fn coverage_table(rows: &[CoverageStats]) -> String {
        let w = Self::name_width(rows);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>20}  {:>9}", "", "FICHAD-1", "FICHAD-2");
        let _ = writeln!(s, "{:<w$}  {:>9}  {:>9}  {:>9}", "Dataset", "Single", "Both", "Entity");
        for r in rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>9.2}  {:>9.2}  {:>9.2}",
                r.dataset, r.single_entity_coverage, r.both_entity_coverage, r.entity_coverage
            );
        }
        s
    }
}
