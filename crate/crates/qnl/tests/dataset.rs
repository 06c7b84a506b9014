use proptest::prelude::*;
use qnl::dataset::{
    build_training_pairs, filter_dataset, load_dataset, parse_dataset, render_dataset, save_dataset, DatasetError,
    Format, NegativePolicy, QnlRecord,
};
use qnl_core::pairs::retention;
use qnl_core::{DescriptionEntry, DescriptionKind};
use serde_json::json;

fn text() -> impl Strategy<Value = String> {
    "[ -~\u{e9}\u{4e2d}\u{1f600}\\\\\"\n]{0,24}"
}

fn record(uid: usize) -> impl Strategy<Value = QnlRecord> {
    (
        text(),
        proptest::option::of(text()),
        proptest::option::of(text()),
        proptest::option::of(any::<bool>()),
        proptest::option::of(0.0f64..=1.0),
        proptest::option::of(text()),
    )
        .prop_map(move |(raw, labeled, synth, label, score, extra)| {
            let mut r = QnlRecord::new(format!("u{uid}"), raw);
            r.query_labeled = labeled;
            r.nl_synth = synth;
            r.manual_label = label;
            if let Some(s) = score {
                r.scores.insert("bi".into(), s);
                r.decisions.insert("bi".into(), s > 0.5);
            }
            if let Some(e) = extra {
                r.extra.insert("note".into(), json!(e));
            }
            r.descriptions
                .push(DescriptionEntry::new("x", DescriptionKind::Entity, "y"));
            r
        })
}

fn records(n: usize) -> impl Strategy<Value = Vec<QnlRecord>> {
    (0..n).map(record).collect::<Vec<_>>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn five_hundred_records_round_trip(rs in records(500)) {
        let dir = tempfile::tempdir().unwrap();
        for (name, format) in [("d.json", Format::JsonArray), ("d.jsonl", Format::Jsonl)] {
            let path = dir.path().join(name);
            save_dataset(&rs, &path, format).unwrap();
            let back = load_dataset(&path, format).unwrap();
            prop_assert_eq!(&back, &rs);
            prop_assert_eq!(render_dataset(&back, format).unwrap(), std::fs::read_to_string(&path).unwrap());
        }
    }
}

#[test]
fn empty_array_loads() {
    assert!(parse_dataset("[]", Format::JsonArray, "mem").unwrap().is_empty());
    assert_eq!(render_dataset(&[], Format::Jsonl).unwrap(), "");
}

#[test]
fn duplicate_uid_is_rejected() {
    let text = r#"[{"uid":"q1","query_raw":"ASK {}"},{"uid":"q1","query_raw":"ASK {}"}]"#;
    match parse_dataset(text, Format::JsonArray, "mem") {
        Err(DatasetError::DuplicateUid(ids)) => assert_eq!(ids, vec!["q1".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn jsonl_bytes_round_trip() {
    let text = concat!(
        r#"{"uid":"a","query_raw":"ASK { wd:Q1 wdt:P31 wd:Q5 }","nl_human":"Is it?","lcquad_split":"train"}"#,
        "\n",
        r#"{"uid":"b","query_raw":"SELECT ?x WHERE { ?x wdt:P31 wd:Q5 }","scores":{"bi":0.25},"manual_label":false}"#,
        "\n",
        r#"{"uid":"c","query_raw":"SELECT (COUNT(?x) AS ?n) WHERE { ?x ?p ?o }","extra_num":3}"#,
        "\n",
    );
    let rs = parse_dataset(text, Format::Jsonl, "mem").unwrap();
    assert_eq!(rs.len(), 3);
    assert_eq!(rs[0].extra["lcquad_split"], "train");
    assert_eq!(render_dataset(&rs, Format::Jsonl).unwrap(), text);
}

#[test]
fn out_of_range_score_is_invalid() {
    let mut r = QnlRecord::new("s", "ASK {}");
    r.scores.insert("bi".into(), 1.3);
    assert!(matches!(
        render_dataset(&[r], Format::Jsonl),
        Err(DatasetError::Invalid { field, .. }) if field.contains("bi")
    ));
}

#[test]
fn parse_error_reports_position() {
    match parse_dataset("{\"uid\":\"a\",\"query_raw\":\"x\"}\n{oops", Format::Jsonl, "f.jsonl") {
        Err(DatasetError::Parse { line, path, .. }) => assert_eq!((line, path.as_str()), (2, "f.jsonl")),
        other => panic!("{other:?}"),
    }
}

fn complete(n: usize) -> Vec<QnlRecord> {
    (0..n)
        .map(|i| {
            let mut r = QnlRecord::new(format!("r{i}"), "ASK {}");
            r.query_labeled = Some(format!("ASK {{ [e{i}] [p] [o] }}"));
            r.nl_synth = Some(format!("Is e{i} related to o?"));
            r.nl_negative = Some(format!("Is e{i} unrelated to o?"));
            r
        })
        .collect()
}

/// All permutations of 0..n without fixed points.
fn all_derangements(n: usize) -> Vec<Vec<usize>> {
    fn go(n: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for v in 0..n {
            if !used[v] && v != cur.len() {
                used[v] = true;
                cur.push(v);
                go(n, cur, used, out);
                cur.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(n, &mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

#[test]
fn shuffled_negatives_form_a_derangement() {
    let rs = complete(5);
    let pairs = build_training_pairs(&rs, NegativePolicy::Shuffled, 7).unwrap();
    assert_eq!(pairs.len(), 10);
    assert!(pairs[..5].iter().all(|p| p.label == 1));
    assert!(pairs[5..].iter().all(|p| p.label == 0));
    let perm: Vec<usize> = pairs[5..]
        .iter()
        .map(|p| {
            rs.iter()
                .position(|r| r.nl_synth.as_deref() == Some(p.text.as_str()))
                .unwrap()
        })
        .collect();
    let known = all_derangements(5);
    assert_eq!(known.len(), 44);
    assert!(known.contains(&perm), "{perm:?}");
    for (i, p) in pairs[5..].iter().enumerate() {
        assert_eq!(p.query_labeled, rs[i].query_labeled.clone().unwrap());
    }
    assert_eq!(pairs, build_training_pairs(&rs, NegativePolicy::Shuffled, 7).unwrap());
}

#[test]
fn single_record_policies() {
    let rs = complete(1);
    let hard = build_training_pairs(&rs, NegativePolicy::Hard, 0).unwrap();
    assert_eq!(hard.iter().map(|p| p.label).collect::<Vec<_>>(), vec![1, 0]);
    assert_eq!(hard[1].text, "Is e0 unrelated to o?");
    assert!(matches!(
        build_training_pairs(&rs, NegativePolicy::Shuffled, 0),
        Err(DatasetError::Pairs(_))
    ));
}

#[test]
fn hard_policy_needs_negatives() {
    let mut rs = complete(2);
    rs[1].nl_negative = None;
    assert!(matches!(
        build_training_pairs(&rs, NegativePolicy::Hard, 0),
        Err(DatasetError::MissingField {
            field: "nl_negative",
            ..
        })
    ));
}

#[test]
fn retention_fractions() {
    assert!((retention(300, 279).unwrap() - 0.93).abs() < 1e-12);
    assert!((retention(300, 129).unwrap() - 0.43).abs() < 1e-12);
    assert_eq!(retention(300, 300).unwrap(), 1.0);
    assert!(retention(0, 0).is_err());
}

#[test]
fn filter_keeps_boundary_and_partitions() {
    let mut rs = complete(4);
    for (r, s) in rs.iter_mut().zip([0.59, 0.6, 0.61, 1.0]) {
        r.scores.insert("bi".into(), s);
    }
    let out = filter_dataset(&rs, "bi", 0.6).unwrap();
    let kept: Vec<&str> = out.kept.iter().map(|r| r.uid.as_str()).collect();
    assert_eq!(kept, ["r1", "r2", "r3"]);
    assert_eq!(out.dropped.len(), 1);
    assert_eq!(out.retention, 0.75);
    assert!(filter_dataset(&rs, "head", 0.6).is_err());
}
