#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use qnl::assets::PromptAssets;
use qnl::config::RunConfig;
use qnl::dataset::{load_dataset, render_dataset, Format};
use qnl::kg::KgCache;
use qnl::llm::{history_digest, ChatTurn, MockFixture};
use qnl::llm::{Gateway, MockBackend, ProviderConfig};
use qnl::pipeline::{self, Scorer};
use qnl_core::prompt::{build_negative_prompt, build_prompt, REFLECTION_INSTRUCTION};
use qnl_core::{DescriptionEntry, DescriptionKind};

pub const LEMANS_LABELED: &str = "select (count(?sub) as ?value ) { ?sub [victory] [24 Hours of Le Mans] }";
pub const LEMANS_FIRST: &str = "How many times has the 24 Hours of Le Mans won a victory?";
pub const LEMANS_FINAL: &str = "How many victories have been achieved in the 24 Hours of Le Mans?";
pub const LEMANS_NEGATIVE: &str = "Which races has the 24 Hours of Le Mans won?";
pub const LEMANS_DESCRIPTIONS_LINE: &str = "Entity and Relation Descriptions: ['[24 Hours of Le Mans] is annual sports car race held in France', '[victory] is competition or sports event won by the subject']";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn lemans_descriptions() -> Vec<DescriptionEntry> {
    vec![
        DescriptionEntry::new(
            "24 Hours of Le Mans",
            DescriptionKind::Entity,
            "annual sports car race held in France",
        ),
        DescriptionEntry::new(
            "victory",
            DescriptionKind::Relation,
            "competition or sports event won by the subject",
        ),
    ]
}

/// Mock responses reproducing the Le Mans exchange under the built-in assets.
pub fn lemans_fixture() -> MockFixture {
    let assets = PromptAssets::builtin();
    let bundle = build_prompt(LEMANS_LABELED, &lemans_descriptions(), &assets.examples, &assets.template).unwrap();
    let first = vec![ChatTurn::user(bundle.rendered.clone())];
    let mut reflected = first.clone();
    reflected.push(ChatTurn::assistant(LEMANS_FIRST));
    reflected.push(ChatTurn::user(REFLECTION_INSTRUCTION));
    let negative = vec![ChatTurn::user(
        build_negative_prompt(LEMANS_LABELED, LEMANS_FINAL, &assets.template).unwrap(),
    )];
    let mut responses = BTreeMap::new();
    responses.insert(history_digest(&first), LEMANS_FIRST.to_string());
    responses.insert(history_digest(&reflected), LEMANS_FINAL.to_string());
    responses.insert(history_digest(&negative), LEMANS_NEGATIVE.to_string());
    MockFixture { responses }
}

pub fn write_lemans_fixture(path: &Path) {
    std::fs::write(path, serde_json::to_string_pretty(&lemans_fixture()).unwrap() + "\n").unwrap();
}

/// Compares `actual` with the golden file `name`, rewriting it instead when
/// `UPDATE_GOLDEN` is set.
pub fn assert_golden(name: &str, actual: &str) {
    let path = golden().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDEN=1 to create it", path.display()));
    assert!(
        expected == actual,
        "{} differs from the golden copy:\n{actual}",
        path.display()
    );
}

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

/// A single-threaded HTTP/1.1 server answering each request with the next
/// canned `(status, body)`; the last one repeats.
pub struct FakeServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
}

impl FakeServer {
    pub fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            let mut i = 0;
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    continue;
                }
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or("").to_string();
                let path = parts.next().unwrap_or("").to_string();
                let mut headers = Vec::new();
                let mut len = 0;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
                        if k == "content-length" {
                            len = v.parse().unwrap();
                        }
                        headers.push((k, v));
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Recorded {
                    method,
                    path,
                    headers,
                    body: String::from_utf8_lossy(&body).into_owned(),
                });
                let (status, text) = &responses[i.min(responses.len() - 1)];
                i += 1;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Self { url, requests }
    }

    pub fn recorded(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

impl Recorded {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

pub fn pipeline_config(fixture: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        timestamp: Some("2025-01-01T00:00:00Z".into()),
        jobs: 3,
        ..RunConfig::default()
    };
    cfg.endpoint.url = format!("fixture:{}", fixtures().join("kg.json").display());
    cfg.endpoint.rate_limit_per_s = 0.0;
    cfg.provider = ProviderConfig {
        fixture: Some(fixture.to_path_buf()),
        model_id: "mock-gpt".into(),
        rate_limit_per_s: 0.0,
        ..ProviderConfig::default()
    };
    cfg.verifier.embedder.dim = 64;
    cfg
}

pub fn pipeline_gateway(cfg: &RunConfig) -> Gateway {
    let backend = MockBackend::from_file(cfg.provider.fixture.as_deref().unwrap()).unwrap();
    Gateway::new(cfg.provider.clone(), Box::new(backend))
}

/// enrich, translate, negatives, score and filter over the 10-record set.
pub fn run_pipeline(dir: &Path) -> (String, String, String) {
    let fixture = dir.join("llm.json");
    write_lemans_fixture(&fixture);
    let cfg = pipeline_config(&fixture);
    let mut records = load_dataset(&fixtures().join("pipeline_10.json"), Format::JsonArray).unwrap();

    let transport = pipeline::open_transport(&cfg).unwrap();
    let cache = KgCache::in_memory();
    let r = pipeline::cmd_enrich(&mut records, &cfg, transport.as_ref(), &cache).unwrap();
    assert_eq!((r.done, r.failed), (10, 0), "{r:?}");

    let assets = PromptAssets::builtin();
    let g = pipeline_gateway(&cfg);
    let r = pipeline::cmd_translate(&mut records, &cfg, &assets, &g).unwrap();
    assert_eq!(r.done, 10);
    let r = pipeline::cmd_negatives(&mut records, &cfg, &assets, &g).unwrap();
    assert_eq!(r.done, 10);

    let scorer = Scorer::from_config(&cfg.verifier).unwrap();
    let r = pipeline::cmd_score(&mut records, &cfg, &scorer).unwrap();
    assert_eq!(r.done, 10);
    let (outcome, summary) = pipeline::cmd_filter(&records, "bi", Some(0.3)).unwrap();

    (
        render_dataset(&records, Format::JsonArray).unwrap(),
        render_dataset(&outcome.kept, Format::Jsonl).unwrap(),
        summary.render(),
    )
}
