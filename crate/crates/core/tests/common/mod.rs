//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fichad::embed::{EmbeddingModel, Family, Loss, Objective, Sample};
use fichad::eval::{Metrics, QueryDirection};
use fichad::kg::{EntityId, KnowledgeGraph, Triple, Vocab};
use fichad::pipeline::{BackendKind, Pipeline, PipelineError, RunConfig, PROMPTS_FILE};
use fichad::prompt::PromptRecord;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GOLDEN_QUERY: &str = "(View of Arles, depict, ?)";

pub fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/arles/dataset.json")
}

pub fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/view_of_arles_depict.txt")
}

pub fn graph_from(n_entities: usize, n_relations: usize, splits: [Vec<Triple>; 3]) -> KnowledgeGraph {
    let mut entities = Vocab::new();
    for i in 0..n_entities {
        entities.intern(&format!("e{i}"));
    }
    let mut relations = Vocab::new();
    for j in 0..n_relations {
        relations.intern(&format!("r{j}"));
    }
    let [train, valid, test] = splits;
    KnowledgeGraph::new(entities, relations, train, valid, test)
}

/// Distinct random triples spread over three splits; test and valid are never empty.
pub fn random_kg(rng: &mut ChaCha8Rng, max_entities: usize, max_relations: usize, max_triples: usize) -> KnowledgeGraph {
    let ne = rng.random_range(3..=max_entities);
    let nr = rng.random_range(1..=max_relations);
    let want = rng.random_range(3..=max_triples).min(ne * ne * nr);
    let mut set = BTreeSet::new();
    while set.len() < want {
        set.insert(Triple::new(
            rng.random_range(0..ne as u32),
            rng.random_range(0..nr as u32),
            rng.random_range(0..ne as u32),
        ));
    }
    let mut all: Vec<Triple> = set.into_iter().collect();
    all.shuffle(rng);
    let n_test = (all.len() / 5).max(1);
    let n_valid = (all.len() / 10).max(1);
    let test = all.split_off(all.len() - n_test);
    let valid = all.split_off(all.len() - n_valid);
    graph_from(ne, nr, [all, valid, test])
}

/// A lookup-table scorer with few distinct values so that ties are common.
pub fn table_scorer(rng: &mut ChaCha8Rng, ne: usize, nr: usize) -> impl Fn(Triple) -> f64 + Sync {
    let levels = rng.random_range(2..=6);
    let table: Vec<f64> = (0..ne * nr * ne)
        .map(|_| rng.random_range(0..levels) as f64 * 0.25 - 0.5)
        .collect();
    move |t: Triple| table[(t.head.index() * nr + t.relation.index()) * ne + t.tail.index()]
}

/// Filtered candidates by scanning every split for competing answers.
pub fn brute_candidates(g: &KnowledgeGraph, dir: QueryDirection, truth: Triple) -> Vec<EntityId> {
    let all: Vec<Triple> = [fichad::kg::Split::Train, fichad::kg::Split::Valid, fichad::kg::Split::Test]
        .iter()
        .flat_map(|s| g.split(*s).to_vec())
        .collect();
    let mut out = Vec::new();
    for e in 0..g.num_entities() as u32 {
        let e = EntityId(e);
        let cand = match dir {
            QueryDirection::Tail => Triple { tail: e, ..truth },
            QueryDirection::Head => Triple { head: e, ..truth },
        };
        let answer = match dir {
            QueryDirection::Tail => truth.tail,
            QueryDirection::Head => truth.head,
        };
        if e == answer || !all.contains(&cand) {
            out.push(e);
        }
    }
    out
}

/// Position in a descending sort, averaged over the tie block.
pub fn brute_rank(scores: &[f64], truth: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let s = scores[truth];
    let first = order.iter().position(|&i| scores[i] == s).unwrap();
    let last = order.iter().rposition(|&i| scores[i] == s).unwrap();
    (first + 1 + last + 1) as f64 / 2.0
}

pub fn brute_metrics(ranks: &[f64]) -> Metrics {
    let n = ranks.len() as f64;
    let mut m = Metrics {
        mrr: 0.0,
        hits1: 0.0,
        hits3: 0.0,
        hits10: 0.0,
        n_queries: ranks.len(),
    };
    for &r in ranks {
        m.mrr += 1.0 / r / n;
        for (k, slot) in [(1.0, &mut m.hits1), (3.0, &mut m.hits3), (10.0, &mut m.hits10)] {
            if r <= k {
                *slot += 1.0 / n;
            }
        }
    }
    m
}

/// Worst per-triple relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic
/// and central-difference gradients over `n` random samples.
pub fn gradient_check(family: Family, loss: Loss, n: usize, eps: f64, seed: u64) -> f64 {
    let (ne, nr, dim) = (12, 3, 6);
    let gamma = if family == Family::RotatE { 6.0 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obj = Objective {
        loss,
        margin: if family == Family::RotatE { 6.0 } else { 1.0 },
        l2: 1e-3,
    };
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let model = EmbeddingModel::init(family, dim, gamma, ne, nr, seed * 1000 + i as u64);
        let tr = |rng: &mut ChaCha8Rng| {
            Triple::new(rng.random_range(0..ne as u32), rng.random_range(0..nr as u32), rng.random_range(0..ne as u32))
        };
        let positive = tr(&mut rng);
        let k = rng.random_range(1..=3);
        let sample = Sample {
            positive,
            negatives: (0..k).map(|_| tr(&mut rng)).collect(),
        };
        let (_, grads) = model.gradients(&sample, &obj);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let involved_e: BTreeSet<EntityId> = std::iter::once(&sample.positive)
            .chain(&sample.negatives)
            .flat_map(|t| [t.head, t.tail])
            .collect();
        let involved_r: BTreeSet<_> = std::iter::once(&sample.positive)
            .chain(&sample.negatives)
            .map(|t| t.relation)
            .collect();
        for &e in &involved_e {
            for c in 0..model.entity_width() {
                let mut plus = model.clone();
                plus.entity_row_mut(e)[c] += eps;
                let mut minus = model.clone();
                minus.entity_row_mut(e)[c] -= eps;
                numeric.push((plus.loss(&sample, &obj) - minus.loss(&sample, &obj)) / (2.0 * eps));
                analytic.push(grads.entity.get(&e).map_or(0.0, |row| row[c]));
            }
        }
        for &r in &involved_r {
            for c in 0..model.relation_width() {
                let mut plus = model.clone();
                plus.relation_row_mut(r)[c] += eps;
                let mut minus = model.clone();
                minus.relation_row_mut(r)[c] -= eps;
                numeric.push((plus.loss(&sample, &obj) - minus.loss(&sample, &obj)) / (2.0 * eps));
                analytic.push(grads.relation.get(&r).map_or(0.0, |row| row[c]));
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale > 0.0 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

/// Two clusters of 30 entities, each split into six groups of five.
/// `sameGroup` links every ordered pair inside a group (self loops
/// included); `partner` maps each group of the first cluster onto the
/// matching group of the second. That is 450 facts, shuffled into 400 train
/// and 50 test triples, so every structurally valid answer is observed.
pub fn two_cluster_kg(seed: u64) -> KnowledgeGraph {
    let group = |e: u32| e / 5;
    let mut facts = Vec::new();
    for h in 0..60u32 {
        for t in 0..60u32 {
            if group(h) == group(t) {
                facts.push(Triple::new(h, 0, t));
            }
            if h < 30 && group(t) == group(h) + 6 {
                facts.push(Triple::new(h, 1, t));
            }
        }
    }
    assert_eq!(facts.len(), 450);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    facts.shuffle(&mut rng);
    let train = facts[..400].to_vec();
    let test = facts[400..450].to_vec();
    graph_from(60, 2, [train, Vec::new(), test])
}

/// Writes a synthetic multimodal dataset and returns its `dataset.json` path.
/// Entity `i` has `i % 5` images, every third entity a description.
pub fn write_synthetic_dataset(dir: &Path, n_entities: usize, n_relations: usize, n_triples: usize, seed: u64) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = BTreeSet::new();
    while set.len() < n_triples {
        let h = rng.random_range(0..n_entities);
        let t = rng.random_range(0..n_entities);
        if h != t {
            set.insert((h, rng.random_range(0..n_relations), t));
        }
    }
    let mut all: Vec<_> = set.into_iter().collect();
    all.shuffle(&mut rng);
    let n_held = n_triples / 10;
    let lines = |ts: &[(usize, usize, usize)]| {
        ts.iter().fold(String::new(), |mut s, (h, r, t)| {
            writeln!(s, "ent{h}\trel{r}\tent{t}").unwrap();
            s
        })
    };
    fs::write(dir.join("test.tsv"), lines(&all[..n_held])).unwrap();
    fs::write(dir.join("valid.tsv"), lines(&all[n_held..2 * n_held])).unwrap();
    fs::write(dir.join("train.tsv"), lines(&all[2 * n_held..])).unwrap();
    let (mut images, mut names, mut descs) = (String::new(), String::new(), String::new());
    for i in 0..n_entities {
        writeln!(names, "ent{i}\tEntity {i}").unwrap();
        for j in 0..i % 5 {
            writeln!(images, "ent{i}\timg/ent{i}/{j}.jpg").unwrap();
        }
        if i % 3 == 0 {
            writeln!(descs, "ent{i}\tEntity {i} is a synthetic entity. It has id {i}.").unwrap();
        }
    }
    fs::write(dir.join("images.tsv"), images).unwrap();
    fs::write(dir.join("names.tsv"), names).unwrap();
    fs::write(dir.join("descriptions.tsv"), descs).unwrap();
    let cfg = serde_json::json!({
        "id": "synthetic",
        "train": "train.tsv",
        "valid": "valid.tsv",
        "test": "test.tsv",
        "images": "images.tsv",
        "descriptions": "descriptions.tsv",
        "names": "names.tsv",
        "image_cap": 10,
    });
    let path = dir.join("dataset.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

pub fn mock_config(dataset: &Path, out: &Path, seed: u64) -> RunConfig {
    RunConfig {
        dataset: Some(dataset.to_path_buf()),
        out: out.to_path_buf(),
        backend: BackendKind::Mock,
        seed,
        ..RunConfig::default()
    }
}

/// Runs gen-context, templates and build-prompts; returns the backend calls
/// each step made.
pub fn run_context_pipeline(cfg: RunConfig) -> Result<Vec<u64>, PipelineError> {
    let p = Pipeline::new(cfg)?;
    let calls = |v: &serde_json::Value| v["backend_calls"].as_u64().unwrap_or(0);
    let a = calls(&p.gen_context()?.summary);
    let b = calls(&p.templates_step()?.summary);
    p.build_prompts(0)?;
    Ok(vec![a, b])
}

/// The golden configuration: fixture dataset, seed 7, two neighbors, both
/// context blocks.
pub fn golden_config(out: &Path) -> RunConfig {
    RunConfig {
        k: 2,
        both: true,
        ..mock_config(&fixture_config(), out, 7)
    }
}

pub fn read_prompts(out: &Path) -> HashMap<String, PromptRecord> {
    fichad::context::load_jsonl::<PromptRecord>(&out.join(PROMPTS_FILE))
        .unwrap()
        .into_iter()
        .map(|r| (r.query.clone(), r))
        .collect()
}

pub fn golden_prompt(out: &Path) -> String {
    run_context_pipeline(golden_config(out)).unwrap();
    read_prompts(out)
        .remove(GOLDEN_QUERY)
        .expect("golden query among the prompts")
        .text
}
