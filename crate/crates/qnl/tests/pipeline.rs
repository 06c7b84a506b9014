mod common;

use std::path::Path;

use common::*;
use qnl::assets::PromptAssets;
use qnl::dataset::{load_dataset, Format, QnlRecord};
use qnl::kg::{FixtureTransport, KgCache};
use qnl::pipeline::{self, Scorer};
use qnl_core::rewrite::contains_absolute_iri;

#[test]
fn mock_stack_is_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_pipeline(a.path());
    let second = run_pipeline(b.path());
    assert_eq!(first, second);
    assert_golden("pipeline_10.json", &first.0);
    assert_golden("pipeline_10.kept.jsonl", &first.1);
    assert_golden("pipeline_10.filter.txt", &first.2);
}

#[test]
fn lemans_record_matches_reference_exchange() {
    let dir = tempfile::tempdir().unwrap();
    let (all, _, _) = run_pipeline(dir.path());
    let records: Vec<QnlRecord> = serde_json::from_str(&all).unwrap();
    let lemans = records.iter().find(|r| r.uid == "lemans").unwrap();
    assert_eq!(lemans.query_labeled.as_deref(), Some(LEMANS_LABELED));
    assert_eq!(lemans.descriptions, lemans_descriptions());
    assert_eq!(lemans.nl_synth_first.as_deref(), Some(LEMANS_FIRST));
    assert_eq!(lemans.nl_synth.as_deref(), Some(LEMANS_FINAL));
    assert_eq!(lemans.nl_negative.as_deref(), Some(LEMANS_NEGATIVE));
    let stamp = &lemans.provenance["translate"];
    assert_eq!(stamp.model_id.as_deref(), Some("mock-gpt"));
    assert_eq!(stamp.params["reflect"], "true");
    for r in &records {
        assert!(!contains_absolute_iri(r.query_labeled.as_deref().unwrap()), "{}", r.uid);
        assert!(r.failures.is_empty(), "{}: {:?}", r.uid, r.failures);
        assert!(r.scores.contains_key("bi") && r.scores.contains_key("bi@human"));
        assert_eq!(r.extra["lcquad_split"], "test");
    }
    let curie = records.iter().find(|r| r.uid == "curie").unwrap();
    assert!(curie.descriptions.iter().any(|d| d.missing_description));
}

#[test]
fn second_run_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("llm.json");
    write_lemans_fixture(&fixture);
    let cfg = pipeline_config(&fixture);
    let mut records = load_dataset(&fixtures().join("pipeline_10.json"), Format::JsonArray).unwrap();
    let kg = FixtureTransport::from_file(&fixtures().join("kg.json")).unwrap();
    let cache = KgCache::in_memory();
    pipeline::cmd_enrich(&mut records, &cfg, &kg, &cache).unwrap();
    let g = pipeline_gateway(&cfg);
    let assets = PromptAssets::builtin();
    pipeline::cmd_translate(&mut records, &cfg, &assets, &g).unwrap();
    let snapshot = records.clone();
    let sent = g.requests_sent();
    let requests = kg.requests().len();

    let mut later = cfg.clone();
    later.timestamp = Some("2030-01-01T00:00:00Z".into());
    let e = pipeline::cmd_enrich(&mut records, &later, &kg, &cache).unwrap();
    let t = pipeline::cmd_translate(&mut records, &later, &assets, &g).unwrap();
    assert_eq!((e.skipped, t.skipped), (10, 10));
    assert_eq!(records, snapshot);
    assert_eq!(g.requests_sent(), sent);
    assert_eq!(kg.requests().len(), requests);
}

#[test]
fn reflect_off_stores_first_as_final() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("llm.json");
    write_lemans_fixture(&fixture);
    let mut cfg = pipeline_config(&fixture);
    cfg.reflect = false;
    let mut r = QnlRecord::new("lemans", "unused");
    r.query_labeled = Some(LEMANS_LABELED.into());
    r.descriptions = lemans_descriptions();
    let mut records = vec![r];
    let g = pipeline_gateway(&cfg);
    pipeline::cmd_translate(&mut records, &cfg, &PromptAssets::builtin(), &g).unwrap();
    assert_eq!(records[0].nl_synth.as_deref(), Some(LEMANS_FIRST));
    assert_eq!(records[0].nl_synth_first, records[0].nl_synth);
    assert_eq!(records[0].provenance["translate"].params["reflect"], "false");
    assert_eq!(g.requests_sent(), 1);
}

#[test]
fn missing_inputs_leave_markers() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("llm.json");
    write_lemans_fixture(&fixture);
    let cfg = pipeline_config(&fixture);
    let g = pipeline_gateway(&cfg);
    let assets = PromptAssets::builtin();
    let mut records = vec![QnlRecord::new("a", "ASK {}")];
    let t = pipeline::cmd_translate(&mut records, &cfg, &assets, &g).unwrap();
    let n = pipeline::cmd_negatives(&mut records, &cfg, &assets, &g).unwrap();
    assert_eq!((t.failed, n.failed), (1, 1));
    assert_eq!(records[0].failures["translate"], "missing query_labeled");
    assert!(!t.exhausted());

    records[0].query_labeled = Some("ASK { [a] [b] [c] }".into());
    let scorer = Scorer::from_config(&cfg.verifier).unwrap();
    let s = pipeline::cmd_score(&mut records, &cfg, &scorer).unwrap();
    assert_eq!(s.failed, 1);
    assert_eq!(records[0].failures["score"], "missing nl_synth");
}

#[test]
fn unreachable_endpoint_marks_records() {
    let cfg = pipeline_config(Path::new("unused"));
    let mut records = load_dataset(&fixtures().join("pipeline_10.json"), Format::JsonArray).unwrap();
    records.truncate(3);
    let kg = FixtureTransport::unreachable();
    let mut fast = cfg.clone();
    fast.endpoint.backoff_ms = 0;
    let r = pipeline::cmd_enrich(&mut records, &fast, &kg, &KgCache::in_memory()).unwrap();
    assert_eq!((r.done, r.failed), (0, 3));
    assert!(records
        .iter()
        .all(|r| r.failures.contains_key("enrich") && r.query_labeled.is_none()));
}

#[test]
fn bi_scores_match_direct_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (all, _, _) = run_pipeline(dir.path());
    let records: Vec<QnlRecord> = serde_json::from_str(&all).unwrap();
    let embedder = qnl::embed::MockEmbedder::new(64, 0);
    for r in &records {
        let direct = qnl::scoring::score_bi(
            r.query_labeled.as_deref().unwrap(),
            r.nl_synth.as_deref().unwrap(),
            &embedder,
            0.5,
        )
        .unwrap();
        assert_eq!(direct.value, r.scores["bi"]);
        assert_eq!(direct.decision, r.decisions["bi"]);
    }
}
