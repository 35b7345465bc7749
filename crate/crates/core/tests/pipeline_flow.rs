//! End-to-end mock runs over the fixture dataset.

mod common;

use std::fs;

use common::*;
use fichad::context::{select_images, Variant};
use fichad::pipeline::{Pipeline, RunConfig, CACHE_FILE, CONTEXTS_FILE, PROMPTS_FILE, REPORT_FILE};
use proptest::prelude::*;

#[test]
fn output_does_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_synthetic_dataset(&tmp.path().join("data"), 60, 4, 200, 2);
    let mut outs = Vec::new();
    for jobs in [1, 4] {
        let out = tmp.path().join(format!("jobs{jobs}"));
        run_context_pipeline(RunConfig {
            jobs,
            ..mock_config(&data, &out, 7)
        })
        .unwrap();
        outs.push((fs::read(out.join(CONTEXTS_FILE)).unwrap(), fs::read(out.join(PROMPTS_FILE)).unwrap()));
    }
    assert!(outs[0] == outs[1]);
}

#[test]
fn seed_changes_mock_output() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_context_pipeline(mock_config(&fixture_config(), &a, 7)).unwrap();
    run_context_pipeline(mock_config(&fixture_config(), &b, 8)).unwrap();
    assert_ne!(fs::read(a.join(CONTEXTS_FILE)).unwrap(), fs::read(b.join(CONTEXTS_FILE)).unwrap());
}

#[test]
fn cache_lines_are_unique_keys() {
    let tmp = tempfile::tempdir().unwrap();
    run_context_pipeline(mock_config(&fixture_config(), tmp.path(), 7)).unwrap();
    run_context_pipeline(mock_config(&fixture_config(), tmp.path(), 7)).unwrap();
    let text = fs::read_to_string(tmp.path().join(CACHE_FILE)).unwrap();
    let keys: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["k"].as_str().unwrap().to_string())
        .collect();
    let unique: std::collections::HashSet<_> = keys.iter().collect();
    assert_eq!(unique.len(), keys.len());
}

#[test]
fn every_variant_builds_prompts() {
    for variant in Variant::ALL {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            variant,
            token_limit: 1000,
            ..mock_config(&fixture_config(), tmp.path(), 7)
        };
        let p = Pipeline::new(cfg).unwrap();
        p.gen_context().unwrap();
        p.hints().unwrap();
        p.templates_step().unwrap();
        let s = p.build_prompts(0).unwrap().summary;
        assert_eq!(s["queries"], 4, "{variant}");
        let prompts = read_prompts(tmp.path());
        let text = &prompts[GOLDEN_QUERY].text;
        assert!(text.contains(&format!("# Neighbor Contexts:\n# {}\n", variant.name())), "{variant}: {text}");
    }
}

#[test]
fn description_variant_needs_descriptions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_synthetic_dataset(&tmp.path().join("data"), 20, 2, 40, 1);
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&data).unwrap()).unwrap();
    cfg.as_object_mut().unwrap().remove("descriptions");
    fs::write(&data, cfg.to_string()).unwrap();
    let p = Pipeline::new(RunConfig {
        variant: Variant::Fichad1X,
        ..mock_config(&data, &tmp.path().join("out"), 7)
    })
    .unwrap();
    assert!(p.gen_context().is_err());
}

#[test]
fn train_then_eval_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = mock_config(&fixture_config(), tmp.path(), 3);
    cfg.train.dim = Some(8);
    cfg.train.epochs = Some(5);
    let p = Pipeline::new(cfg).unwrap();
    p.train_embed().unwrap();
    let out = p.eval().unwrap();
    assert_eq!(out.summary["n_queries"], 4);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join(REPORT_FILE)).unwrap()).unwrap();
    for k in ["mrr", "hits1", "hits3", "hits10", "head", "tail"] {
        assert!(report.get(k).is_some(), "{k}");
    }
}

#[test]
fn tight_budget_truncates_but_keeps_query() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        token_limit: 20,
        ..golden_config(tmp.path())
    };
    run_context_pipeline(cfg).unwrap();
    for r in read_prompts(tmp.path()).values() {
        assert!(r.n_tokens <= 20);
        assert!(r.text.ends_with(&format!("Query: {}", r.query)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn raising_the_threshold_never_adds_images(
        scores in prop::collection::vec(0.0f64..=1.0, 0..16),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        max in 1usize..8,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let keep_lo = select_images(&scores, lo, max);
        let keep_hi = select_images(&scores, hi, max);
        prop_assert!(keep_hi.iter().all(|i| keep_lo.contains(i)));
        prop_assert!(keep_lo.len() <= max);
        prop_assert!(keep_lo.iter().all(|&i| scores[i] >= lo));
        prop_assert!(keep_lo.windows(2).all(|w| w[0] < w[1]));
    }
}
