//! Label and description lookup against a SPARQL endpoint, with a JSON
//! file cache keyed by `(iri, language)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use qnl_core::rewrite::{local_name, tokenize, IriRef, Role, TokenKind};
use qnl_core::{DescriptionEntry, DescriptionKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::write_atomic;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("endpoint request failed after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
    #[error("metadata for {} IRI(s) is not available: {}", .0.len(), .0.join(", "))]
    Unavailable(Vec<String>),
    #[error("cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub label_predicates: Vec<String>,
    pub description_predicates: Vec<String>,
    pub language: String,
    pub timeout_ms: u64,
    pub max_parallel: usize,
    pub chunk_size: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub rate_limit_per_s: f64,
    /// Namespace rewrites applied before lookup, e.g. Wikidata direct
    /// properties carry their labels on the property entity.
    pub lookup_rewrites: Vec<(String, String)>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        let entity = "http://www.wikidata.org/entity/".to_string();
        Self {
            url: "https://query.wikidata.org/sparql".into(),
            label_predicates: vec!["http://www.w3.org/2000/01/rdf-schema#label".into()],
            description_predicates: vec![
                "http://schema.org/description".into(),
                "http://www.w3.org/2000/01/rdf-schema#comment".into(),
            ],
            language: "en".into(),
            timeout_ms: 30_000,
            max_parallel: 2,
            chunk_size: 25,
            max_attempts: 3,
            backoff_ms: 500,
            rate_limit_per_s: 5.0,
            lookup_rewrites: [
                "http://www.wikidata.org/prop/direct/",
                "http://www.wikidata.org/prop/statement/",
                "http://www.wikidata.org/prop/qualifier/",
                "http://www.wikidata.org/prop/",
            ]
            .iter()
            .map(|ns| (ns.to_string(), entity.clone()))
            .collect(),
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), KgError> {
        if self.label_predicates.is_empty() {
            return Err(KgError::Config("at least one label predicate is required".into()));
        }
        if self.max_parallel == 0 || self.chunk_size == 0 || self.max_attempts == 0 {
            return Err(KgError::Config(
                "max_parallel, chunk_size and max_attempts must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// The IRI whose label and description describe `iri`.
    pub fn lookup_iri(&self, iri: &str) -> String {
        for (from, to) in &self.lookup_rewrites {
            if let Some(rest) = iri.strip_prefix(from.as_str()) {
                if !rest.contains('/') {
                    return format!("{to}{rest}");
                }
            }
        }
        iri.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgEntry {
    pub iri: String,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub fetched_at: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheFile {
    entries: Vec<KgEntry>,
}

/// Metadata cache. Reads are concurrent, writes serialized.
#[derive(Debug, Default)]
pub struct KgCache {
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<(String, String), KgEntry>>,
}

impl KgCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the cache file at `path`; a missing file starts empty.
    pub fn open(path: &Path) -> Result<Self, KgError> {
        let mut map = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| KgError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let file: CacheFile = serde_json::from_str(&text).map_err(|e| KgError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            for e in file.entries {
                map.insert((e.iri.clone(), e.language.clone()), e);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(map),
        })
    }

    pub fn get(&self, iri: &str, language: &str) -> Option<KgEntry> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&(iri.to_string(), language.to_string()))
            .cloned()
    }

    pub fn insert(&self, entry: KgEntry) {
        self.entries
            .write()
            .expect("cache lock")
            .insert((entry.iri.clone(), entry.language.clone()), entry);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Atomically rewrites the cache file, if the cache has one.
    pub fn flush(&self) -> Result<(), KgError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let file = CacheFile {
            entries: self.entries.read().expect("cache lock").values().cloned().collect(),
        };
        let text = serde_json::to_string_pretty(&file).expect("cache serializes");
        write_atomic(path, text.as_bytes()).map_err(|e| KgError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// SPARQL 1.1 JSON results.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SparqlResults {
    #[serde(default)]
    pub head: SparqlHead,
    pub results: SparqlBindings,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SparqlHead {
    #[serde(default)]
    pub vars: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SparqlBindings {
    pub bindings: Vec<BTreeMap<String, SparqlTerm>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparqlTerm {
    #[serde(rename = "type")]
    pub kind: String,
    pub value: String,
    #[serde(rename = "xml:lang", default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
}

/// Executes a SELECT query. Implementations report transport problems as
/// [`KgError::Network`] with `attempts = 1`; retries happen in [`KgClient`].
pub trait SparqlTransport: Send + Sync {
    fn select(&self, query: &str) -> Result<SparqlResults, KgError>;
}

/// SPARQL protocol over HTTP: form-encoded POST, JSON results.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .user_agent(concat!("qnl/", env!("CARGO_PKG_VERSION")))
            .build()
            .new_agent();
        Self {
            url: url.to_string(),
            agent,
        }
    }
}

impl SparqlTransport for HttpTransport {
    fn select(&self, query: &str) -> Result<SparqlResults, KgError> {
        let network = |message: String| KgError::Network { attempts: 1, message };
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Accept", "application/sparql-results+json")
            .send_form([("query", query)])
            .map_err(|e| network(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(network(format!("HTTP {status}")));
        }
        let body = resp.body_mut().read_to_string().map_err(|e| network(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| KgError::Malformed(e.to_string()))
    }
}

/// Offline endpoint answering the lookup queries built by [`lookup_query`]
/// from a table `iri -> predicate -> value`. Every request is logged.
#[derive(Debug, Default)]
pub struct FixtureTransport {
    data: BTreeMap<String, BTreeMap<String, String>>,
    unreachable: bool,
    log: Mutex<Vec<String>>,
}

impl FixtureTransport {
    pub fn new(data: BTreeMap<String, BTreeMap<String, String>>) -> Self {
        Self {
            data,
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, KgError> {
        let text = fs::read_to_string(path).map_err(|e| KgError::Config(format!("{}: {e}", path.display())))?;
        let data = serde_json::from_str(&text).map_err(|e| KgError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(data))
    }

    /// Fails every request.
    pub fn unreachable() -> Self {
        Self {
            unreachable: true,
            ..Self::default()
        }
    }

    pub fn requests(&self) -> Vec<String> {
        self.log.lock().expect("log lock").clone()
    }
}

/// IRIs listed in the `VALUES ?<var> { ... }` block of `query`.
pub fn values_block(query: &str, var: &str) -> Vec<String> {
    let Ok(tokens) = tokenize(query) else {
        return Vec::new();
    };
    let solid: Vec<_> = tokens.iter().filter(|t| t.kind != TokenKind::Whitespace).collect();
    let mut out = Vec::new();
    for w in 0..solid.len() {
        if solid[w].text.eq_ignore_ascii_case("VALUES") && solid.get(w + 1).is_some_and(|t| t.text == var) {
            for t in solid.iter().skip(w + 3) {
                if t.text == "}" {
                    break;
                }
                if t.kind == TokenKind::Iri {
                    out.push(t.text[1..t.text.len() - 1].to_string());
                }
            }
        }
    }
    out
}

impl SparqlTransport for FixtureTransport {
    fn select(&self, query: &str) -> Result<SparqlResults, KgError> {
        self.log.lock().expect("log lock").push(query.to_string());
        if self.unreachable {
            return Err(KgError::Network {
                attempts: 1,
                message: "fixture endpoint unreachable".into(),
            });
        }
        let items = values_block(query, "?item");
        let preds = values_block(query, "?p");
        let mut bindings = Vec::new();
        for item in &items {
            let Some(props) = self.data.get(item) else { continue };
            for p in &preds {
                if let Some(v) = props.get(p) {
                    let term = |kind: &str, value: &str| SparqlTerm {
                        kind: kind.into(),
                        value: value.into(),
                        lang: None,
                    };
                    let mut row = BTreeMap::new();
                    row.insert("item".to_string(), term("uri", item));
                    row.insert("p".to_string(), term("uri", p));
                    row.insert("o".to_string(), term("literal", v));
                    bindings.push(row);
                }
            }
        }
        Ok(SparqlResults {
            head: SparqlHead {
                vars: vec!["item".into(), "p".into(), "o".into()],
            },
            results: SparqlBindings { bindings },
        })
    }
}

/// The batched lookup query for `items` and `predicates`.
pub fn lookup_query(items: &[String], predicates: &[String], language: &str) -> String {
    let iri_list = |v: &[String]| v.iter().map(|i| format!("<{i}>")).collect::<Vec<_>>().join(" ");
    format!(
        "SELECT ?item ?p ?o WHERE {{\n  VALUES ?item {{ {} }}\n  VALUES ?p {{ {} }}\n  ?item ?p ?o .\n  FILTER(isLiteral(?o) && (LANG(?o) = \"\" || LANGMATCHES(LANG(?o), \"{}\")))\n}}",
        iri_list(items),
        iri_list(predicates),
        language.replace('"', "")
    )
}

struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_second: f64) -> Self {
        let interval = if per_second > 0.0 {
            Duration::from_secs_f64(1.0 / per_second)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            next: Mutex::new(Instant::now()),
        }
    }

    fn wait(&self) {
        let slot = {
            let mut next = self.next.lock().expect("limiter lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

/// Language-matched and untagged value of one predicate.
type Matches<'a> = (Option<&'a str>, Option<&'a str>);

pub struct KgClient<'a> {
    cfg: EndpointConfig,
    transport: &'a dyn SparqlTransport,
    cache: &'a KgCache,
    limiter: RateLimiter,
    timestamp: String,
}

impl<'a> KgClient<'a> {
    pub fn new(
        cfg: EndpointConfig,
        transport: &'a dyn SparqlTransport,
        cache: &'a KgCache,
        timestamp: String,
    ) -> Result<Self, KgError> {
        cfg.validate()?;
        let limiter = RateLimiter::new(cfg.rate_limit_per_s);
        Ok(Self {
            cfg,
            transport,
            cache,
            limiter,
            timestamp,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn select_with_retry(&self, query: &str) -> Result<SparqlResults, KgError> {
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.limiter.wait();
            match self.transport.select(query) {
                Ok(r) => return Ok(r),
                Err(KgError::Network { message, .. }) => {
                    if attempt >= self.cfg.max_attempts {
                        return Err(KgError::Network {
                            attempts: attempt,
                            message,
                        });
                    }
                    log::warn!("endpoint attempt {attempt} failed: {message}");
                    thread::sleep(delay);
                    delay *= 2;
                }
                Err(other) => return Err(other),
            }
        }
    }

    fn fetch_chunk(&self, chunk: &[String]) -> Result<(), KgError> {
        let lookups: Vec<String> = chunk.iter().map(|i| self.cfg.lookup_iri(i)).collect();
        let mut unique_lookups = lookups.clone();
        unique_lookups.sort();
        unique_lookups.dedup();
        let preds: Vec<String> = self
            .cfg
            .label_predicates
            .iter()
            .chain(&self.cfg.description_predicates)
            .cloned()
            .collect();
        let results = self.select_with_retry(&lookup_query(&unique_lookups, &preds, &self.cfg.language))?;

        // item -> predicate -> (language-matched value, untagged value)
        let mut found: BTreeMap<&str, BTreeMap<&str, Matches>> = BTreeMap::new();
        for row in &results.results.bindings {
            let (Some(item), Some(p), Some(o)) = (row.get("item"), row.get("p"), row.get("o")) else {
                return Err(KgError::Malformed("binding without item/p/o".into()));
            };
            let slot = found
                .entry(item.value.as_str())
                .or_default()
                .entry(p.value.as_str())
                .or_default();
            match o.lang.as_deref() {
                Some(l) if l.eq_ignore_ascii_case(&self.cfg.language) => {
                    slot.0.get_or_insert(o.value.as_str());
                }
                _ => {
                    slot.1.get_or_insert(o.value.as_str());
                }
            }
        }
        let pick = |item: &str, preds: &[String]| -> Option<String> {
            let props = found.get(item)?;
            preds.iter().find_map(|p| {
                let (tagged, plain) = props.get(p.as_str())?;
                tagged.or(*plain).filter(|v| !v.is_empty()).map(str::to_string)
            })
        };
        for (iri, lookup) in chunk.iter().zip(&lookups) {
            self.cache.insert(KgEntry {
                iri: iri.clone(),
                language: self.cfg.language.clone(),
                label: pick(lookup, &self.cfg.label_predicates),
                description: pick(lookup, &self.cfg.description_predicates),
                fetched_at: self.timestamp.clone(),
            });
        }
        Ok(())
    }

    /// Fetches every uncached IRI, in chunks of `chunk_size` with at most
    /// `max_parallel` requests in flight. Returns the IRIs whose chunk
    /// failed together with the first error.
    pub fn prefetch(&self, iris: &[String]) -> Result<(), (Vec<String>, KgError)> {
        let mut seen = BTreeSet::new();
        let todo: Vec<String> = iris
            .iter()
            .filter(|i| seen.insert(i.as_str()))
            .filter(|i| self.cache.get(i, &self.cfg.language).is_none())
            .cloned()
            .collect();
        let chunks: Vec<&[String]> = todo.chunks(self.cfg.chunk_size).collect();
        let mut failed = Vec::new();
        let mut first_err = None;
        for wave in chunks.chunks(self.cfg.max_parallel) {
            let results: Vec<Result<(), KgError>> = thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|c| s.spawn(|| self.fetch_chunk(c))).collect();
                handles.into_iter().map(|h| h.join().expect("fetch thread")).collect()
            });
            for (chunk, r) in wave.iter().zip(results) {
                if let Err(e) = r {
                    failed.extend(chunk.iter().cloned());
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            None => Ok(()),
            Some(e) => Err((failed, e)),
        }
    }

    fn ensure(&self, iris: &[String]) -> Result<(), KgError> {
        self.prefetch(iris).map_err(|(_, e)| e)
    }

    /// Label, kind and description for each distinct IRI: entities first,
    /// then relations, each in first-seen order. An IRI used as a predicate
    /// anywhere is a relation.
    pub fn get_descriptions(&self, iris: &[IriRef]) -> Result<Vec<DescriptionEntry>, KgError> {
        let names: Vec<String> = iris.iter().map(|r| r.iri.clone()).collect();
        self.ensure(&names)?;
        self.describe_cached(iris)
    }

    /// Like [`KgClient::get_descriptions`] but never touches the network.
    pub fn describe_cached(&self, iris: &[IriRef]) -> Result<Vec<DescriptionEntry>, KgError> {
        let mut order: Vec<&str> = Vec::new();
        let mut relation: BTreeMap<&str, bool> = BTreeMap::new();
        for r in iris {
            let is_pred = r.role == Role::Predicate;
            match relation.get_mut(r.iri.as_str()) {
                Some(flag) => *flag |= is_pred,
                None => {
                    order.push(&r.iri);
                    relation.insert(&r.iri, is_pred);
                }
            }
        }
        let mut missing = Vec::new();
        let mut out = Vec::new();
        for iri in order {
            let Some(entry) = self.cache.get(iri, &self.cfg.language) else {
                missing.push(iri.to_string());
                continue;
            };
            let label = entry.label.unwrap_or_else(|| local_name(iri).to_string());
            let kind = if relation[iri] {
                DescriptionKind::Relation
            } else {
                DescriptionKind::Entity
            };
            out.push(match entry.description {
                Some(d) => DescriptionEntry::new(label, kind, d),
                None => DescriptionEntry::without_description(label, kind),
            });
        }
        if missing.is_empty() {
            out.sort_by_key(|d| d.kind == DescriptionKind::Relation);
            Ok(out)
        } else {
            Err(KgError::Unavailable(missing))
        }
    }

    /// Labels for `iris`; an IRI without a label falls back to its local name.
    pub fn get_labels(&self, iris: &[String]) -> Result<BTreeMap<String, String>, KgError> {
        self.ensure(iris)?;
        self.labels_cached(iris)
    }

    pub fn labels_cached(&self, iris: &[String]) -> Result<BTreeMap<String, String>, KgError> {
        let mut out = BTreeMap::new();
        let mut missing = Vec::new();
        for iri in iris {
            match self.cache.get(iri, &self.cfg.language) {
                Some(e) => {
                    out.insert(iri.clone(), e.label.unwrap_or_else(|| local_name(iri).to_string()));
                }
                None => missing.push(iri.clone()),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            missing.sort();
            missing.dedup();
            Err(KgError::Unavailable(missing))
        }
    }
}
