//! The pipeline steps as library functions. Each step works on records in
//! place, marks per-record failures instead of aborting, and skips records
//! whose stored params digest shows the work was already done.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use qnl_core::prompt::build_prompt;
use qnl_core::rewrite::{default_prefixes, extract_iris, replace_ids, tokenize, IriRef};
use qnl_core::verifier::{HeadHyper, HeadModel, DEFAULT_CLASSIFY_TAU, DEFAULT_FILTER_TAU};
use qnl_core::ProvenanceStamp;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::assets::PromptAssets;
use crate::config::{BackendChoice, EmbedderKind, RunConfig, VerifierConfig};
use crate::dataset::{build_training_pairs, filter_dataset, DatasetError, FilterOutcome, NegativePolicy, QnlRecord};
use crate::digest::json_digest;
use crate::embed::{EmbeddingProvider, FileLookupEmbedder, HttpEmbedder, MockEmbedder};
use crate::kg::{FixtureTransport, HttpTransport, KgCache, KgClient, KgError, SparqlTransport};
use crate::llm::{Gateway, LlmError};
use crate::scoring::{self, external_backend_name, ExternalModel, ScoreError};

pub const TOOL_VERSION: &str = concat!("qnl ", env!("CARGO_PKG_VERSION"));

/// Endpoint URLs with this prefix name a local fixture file instead.
pub const FIXTURE_SCHEME: &str = "fixture:";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
    #[error("{step}: the provider failed for all {attempted} records")]
    ProviderExhausted { step: String, attempted: usize },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Io(_) => 3,
            PipelineError::ProviderExhausted { .. } => 4,
            PipelineError::Data(_) => 1,
        }
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => PipelineError::Io(e.to_string()),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<ScoreError> for PipelineError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::File { .. } => PipelineError::Io(e.to_string()),
            other => PipelineError::Config(other.to_string()),
        }
    }
}

/// Counts for one step over one dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StepReport {
    pub step: String,
    pub total: usize,
    pub done: usize,
    pub skipped: usize,
    pub failed: usize,
    /// Failures caused by the model provider, a subset of `failed`.
    pub provider_failures: usize,
}

impl StepReport {
    /// True when every record that reached the provider failed there.
    pub fn exhausted(&self) -> bool {
        self.provider_failures > 0 && self.done == 0
    }

    pub fn into_result(self) -> Result<StepReport, PipelineError> {
        if self.exhausted() {
            Err(PipelineError::ProviderExhausted {
                step: self.step.clone(),
                attempted: self.provider_failures,
            })
        } else {
            Ok(self)
        }
    }
}

enum Outcome {
    Done,
    Skipped,
    Failed,
    ProviderFailed,
}

fn tally(step: &str, outcomes: &[Outcome]) -> StepReport {
    let mut r = StepReport {
        step: step.to_string(),
        total: outcomes.len(),
        ..StepReport::default()
    };
    for o in outcomes {
        match o {
            Outcome::Done => r.done += 1,
            Outcome::Skipped => r.skipped += 1,
            Outcome::Failed => r.failed += 1,
            Outcome::ProviderFailed => {
                r.failed += 1;
                r.provider_failures += 1;
            }
        }
    }
    r
}

/// The fixed timestamp if configured, else `SOURCE_DATE_EPOCH`, else now.
pub fn run_timestamp(cfg: &RunConfig) -> String {
    if let Some(t) = &cfg.timestamp {
        return t.clone();
    }
    let epoch = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<i64>().ok());
    let when = epoch
        .and_then(|s| chrono::DateTime::from_timestamp(s, 0))
        .unwrap_or_else(chrono::Utc::now);
    when.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn stamp(cfg: &RunConfig, model_id: Option<&str>, digest: String, params: &[(&str, String)]) -> ProvenanceStamp {
    ProvenanceStamp {
        tool_version: TOOL_VERSION.to_string(),
        model_id: model_id.map(str::to_string),
        timestamp: run_timestamp(cfg),
        params_digest: digest,
        params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    }
}

fn up_to_date(r: &QnlRecord, step: &str, digest: &str) -> bool {
    r.provenance.get(step).is_some_and(|p| p.params_digest == digest)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

fn for_each_record<F>(records: &mut [QnlRecord], jobs: usize, f: F) -> Result<Vec<Outcome>, PipelineError>
where
    F: Fn(&mut QnlRecord) -> Outcome + Sync + Send,
{
    Ok(pool(jobs)?.install(|| records.par_iter_mut().map(&f).collect()))
}

fn fail(r: &mut QnlRecord, step: &str, message: impl Into<String>) {
    r.failures.insert(step.to_string(), message.into());
}

/// Opens the SPARQL transport named by the endpoint URL.
pub fn open_transport(cfg: &RunConfig) -> Result<Box<dyn SparqlTransport>, PipelineError> {
    let url = &cfg.endpoint.url;
    if let Some(path) = url.strip_prefix(FIXTURE_SCHEME) {
        let t = FixtureTransport::from_file(Path::new(path)).map_err(|e| PipelineError::Config(e.to_string()))?;
        return Ok(Box::new(t));
    }
    Ok(Box::new(HttpTransport::new(
        url,
        Duration::from_millis(cfg.endpoint.timeout_ms),
    )))
}

/// Fixture endpoints are identified by content so digests do not depend on
/// where the file lives.
fn endpoint_identity(url: &str) -> String {
    match url.strip_prefix(FIXTURE_SCHEME) {
        Some(path) => match std::fs::read(path) {
            Ok(bytes) => format!("{FIXTURE_SCHEME}{}", crate::digest::sha256_hex(&bytes)),
            Err(_) => url.to_string(),
        },
        None => url.to_string(),
    }
}

fn enrich_digest(cfg: &RunConfig, endpoint: &str, query_raw: &str) -> String {
    let e = &cfg.endpoint;
    json_digest(&json!({
        "step": "enrich",
        "endpoint": endpoint,
        "language": e.language,
        "label_predicates": e.label_predicates,
        "description_predicates": e.description_predicates,
        "lookup_rewrites": e.lookup_rewrites,
        "query": query_raw,
    }))
}

/// Fills `query_labeled` and `descriptions` from the knowledge graph.
pub fn cmd_enrich(
    records: &mut [QnlRecord],
    cfg: &RunConfig,
    transport: &dyn SparqlTransport,
    cache: &KgCache,
) -> Result<StepReport, PipelineError> {
    const STEP: &str = "enrich";
    let client = KgClient::new(cfg.endpoint.clone(), transport, cache, run_timestamp(cfg))
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let prefixes = default_prefixes();
    let endpoint = endpoint_identity(&cfg.endpoint.url);

    let mut pending: BTreeMap<usize, Vec<IriRef>> = BTreeMap::new();
    let mut outcomes: Vec<Option<Outcome>> = Vec::with_capacity(records.len());
    for (i, r) in records.iter_mut().enumerate() {
        let digest = enrich_digest(cfg, &endpoint, &r.query_raw);
        if up_to_date(r, STEP, &digest) && r.query_labeled.is_some() {
            outcomes.push(Some(Outcome::Skipped));
            continue;
        }
        match tokenize(&r.query_raw).and_then(|t| extract_iris(&t, &prefixes)) {
            Ok(iris) => {
                pending.insert(i, iris);
                outcomes.push(None);
            }
            Err(e) => {
                fail(r, STEP, format!("query does not parse: {e}"));
                outcomes.push(Some(Outcome::Failed));
            }
        }
    }

    let all: Vec<String> = pending
        .values()
        .flatten()
        .map(|r| r.iri.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Err((failed, e)) = client.prefetch(&all) {
        log::warn!("{} IRIs could not be fetched: {e}", failed.len());
    }

    for (i, iris) in pending {
        let r = &mut records[i];
        let names: Vec<String> = iris.iter().map(|x| x.iri.clone()).collect();
        let result = client.labels_cached(&names).and_then(|labels| {
            let labeled =
                replace_ids(&r.query_raw, &labels, &prefixes).map_err(|e| KgError::Malformed(e.to_string()))?;
            Ok((labeled, client.describe_cached(&iris)?))
        });
        outcomes[i] = Some(match result {
            Ok((labeled, descriptions)) => {
                r.query_labeled = Some(labeled);
                r.descriptions = descriptions;
                r.failures.remove(STEP);
                let digest = enrich_digest(cfg, &endpoint, &r.query_raw);
                r.provenance.insert(STEP.into(), stamp(cfg, None, digest, &[]));
                Outcome::Done
            }
            Err(e) => {
                fail(r, STEP, e.to_string());
                Outcome::Failed
            }
        });
    }
    if let Err(e) = cache.flush() {
        return Err(PipelineError::Io(e.to_string()));
    }
    let outcomes: Vec<Outcome> = outcomes.into_iter().map(|o| o.expect("every record decided")).collect();
    Ok(tally(STEP, &outcomes))
}

fn provider_identity(g: &Gateway) -> serde_json::Value {
    let c = g.config();
    json!({
        "provider": c.provider,
        "model_id": c.model_id,
        "temperature": c.temperature,
        "max_tokens": c.max_tokens,
    })
}

fn is_provider_error(e: &LlmError) -> bool {
    !matches!(e, LlmError::EmptyInput(_) | LlmError::NotUserTurn)
}

/// Translates every labeled record, with reflection when configured.
pub fn cmd_translate(
    records: &mut [QnlRecord],
    cfg: &RunConfig,
    assets: &PromptAssets,
    gateway: &Gateway,
) -> Result<StepReport, PipelineError> {
    const STEP: &str = "translate";
    let ident = provider_identity(gateway);
    let model_id = gateway.config().model_id.clone();
    let outcomes = for_each_record(records, cfg.jobs, |r| {
        let Some(q) = r.query_labeled.clone() else {
            fail(r, STEP, "missing query_labeled");
            return Outcome::Failed;
        };
        let digest = json_digest(&json!({
            "step": STEP,
            "provider": ident,
            "reflect": cfg.reflect,
            "template": assets.template,
            "examples": assets.examples,
            "query": q,
            "descriptions": r.descriptions,
        }));
        if up_to_date(r, STEP, &digest) && r.nl_synth.is_some() {
            return Outcome::Skipped;
        }
        let bundle = match build_prompt(&q, &r.descriptions, &assets.examples, &assets.template) {
            Ok(b) => b,
            Err(e) => {
                fail(r, STEP, e.to_string());
                return Outcome::Failed;
            }
        };
        match gateway.translate_with_reflection(&bundle, cfg.reflect) {
            Ok(t) => {
                r.nl_synth = Some(t.final_.text);
                r.nl_synth_first = Some(t.first.text);
                r.reply_flagged = t.first.flagged || t.final_.flagged;
                r.failures.remove(STEP);
                let params = [
                    ("reflect", cfg.reflect.to_string()),
                    ("k", assets.template.k.to_string()),
                ];
                r.provenance
                    .insert(STEP.into(), stamp(cfg, Some(&model_id), digest, &params));
                Outcome::Done
            }
            Err(e) => {
                let provider = is_provider_error(&e);
                fail(r, STEP, e.to_string());
                if provider {
                    Outcome::ProviderFailed
                } else {
                    Outcome::Failed
                }
            }
        }
    })?;
    Ok(tally(STEP, &outcomes))
}

/// Asks for a hard negative of every translated record.
pub fn cmd_negatives(
    records: &mut [QnlRecord],
    cfg: &RunConfig,
    assets: &PromptAssets,
    gateway: &Gateway,
) -> Result<StepReport, PipelineError> {
    const STEP: &str = "negatives";
    let ident = provider_identity(gateway);
    let model_id = gateway.config().model_id.clone();
    let outcomes = for_each_record(records, cfg.jobs, |r| {
        let (Some(q), Some(t)) = (r.query_labeled.clone(), r.nl_synth.clone()) else {
            let missing = if r.query_labeled.is_none() {
                "query_labeled"
            } else {
                "nl_synth"
            };
            fail(r, STEP, format!("missing {missing}"));
            return Outcome::Failed;
        };
        let digest = json_digest(&json!({
            "step": STEP,
            "provider": ident,
            "instruction": assets.template.negative_instruction,
            "query": q,
            "translation": t,
        }));
        if up_to_date(r, STEP, &digest) && r.nl_negative.is_some() {
            return Outcome::Skipped;
        }
        match gateway.generate_negative(&q, &t, &assets.template) {
            Ok(reply) => {
                r.nl_negative = Some(reply.text);
                r.failures.remove(STEP);
                r.provenance
                    .insert(STEP.into(), stamp(cfg, Some(&model_id), digest, &[]));
                Outcome::Done
            }
            Err(e) => {
                let provider = is_provider_error(&e);
                fail(r, STEP, e.to_string());
                if provider {
                    Outcome::ProviderFailed
                } else {
                    Outcome::Failed
                }
            }
        }
    })?;
    Ok(tally(STEP, &outcomes))
}

pub fn open_embedder(cfg: &crate::config::EmbedderConfig) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
    Ok(match cfg.kind {
        EmbedderKind::Mock => Box::new(MockEmbedder::new(cfg.dim, cfg.seed)),
        EmbedderKind::File => {
            let path = cfg
                .path
                .as_deref()
                .ok_or_else(|| PipelineError::Config("file embedder needs a path".into()))?;
            let e = FileLookupEmbedder::open(path, cfg.normalization).map_err(|e| PipelineError::Io(e.to_string()))?;
            if e.dim() != cfg.dim {
                return Err(PipelineError::Config(format!(
                    "embedding dump has dimension {}, config says {}",
                    e.dim(),
                    cfg.dim
                )));
            }
            Box::new(e)
        }
        EmbedderKind::Http => {
            let url = cfg
                .url
                .as_deref()
                .ok_or_else(|| PipelineError::Config("http embedder needs a url".into()))?;
            Box::new(HttpEmbedder::new(
                url,
                cfg.dim,
                cfg.normalization,
                Duration::from_millis(cfg.timeout_ms),
            ))
        }
    })
}

enum Backend {
    Bi(Box<dyn EmbeddingProvider>),
    Head(Box<dyn EmbeddingProvider>, HeadModel),
    External(ExternalModel),
}

/// A loaded verifier backend and the score key it writes.
pub struct Scorer {
    name: String,
    identity: serde_json::Value,
    backend: Backend,
}

impl Scorer {
    pub fn from_config(cfg: &VerifierConfig) -> Result<Self, PipelineError> {
        let (default_name, identity, backend) = match cfg.backend {
            BackendChoice::Bi => (
                "bi".to_string(),
                json!({"bi": cfg.embedder}),
                Backend::Bi(open_embedder(&cfg.embedder)?),
            ),
            BackendChoice::Head => {
                let path = cfg
                    .head_model
                    .as_deref()
                    .ok_or_else(|| PipelineError::Config("head backend needs a head model file".into()))?;
                let head = scoring::load_head(path)?;
                let identity = json!({"head": json_digest(&head), "embedder": cfg.embedder});
                (
                    "head".to_string(),
                    identity,
                    Backend::Head(open_embedder(&cfg.embedder)?, head),
                )
            }
            BackendChoice::External => {
                let path = cfg
                    .manifest
                    .as_deref()
                    .ok_or_else(|| PipelineError::Config("external backend needs a manifest".into()))?;
                let model = ExternalModel::load(path)?;
                let identity = json!({"external": model.manifest().checksum});
                (external_backend_name(path), identity, Backend::External(model))
            }
        };
        Ok(Self {
            name: cfg.name.clone().unwrap_or(default_name),
            identity,
            backend,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn score(&self, q: &str, t: &str, tau: f64) -> Result<qnl_core::verifier::VerifierScore, ScoreError> {
        let mut s = match &self.backend {
            Backend::Bi(p) => scoring::score_bi(q, t, p.as_ref(), tau)?,
            Backend::Head(p, h) => scoring::score_head(q, t, p.as_ref(), h, tau)?,
            Backend::External(m) => m.score(q, t, &self.name, tau)?,
        };
        s.backend = self.name.clone();
        Ok(s)
    }
}

/// Scores `nl_synth` under the scorer's name and `nl_human` under
/// `<name>@human`, with decisions at `tau` (default 0.5).
pub fn cmd_score(records: &mut [QnlRecord], cfg: &RunConfig, scorer: &Scorer) -> Result<StepReport, PipelineError> {
    const STEP: &str = "score";
    let tau = cfg.tau.unwrap_or(DEFAULT_CLASSIFY_TAU);
    qnl_core::verifier::check_tau(tau).map_err(|e| PipelineError::Config(e.to_string()))?;
    let synth_key = scorer.name().to_string();
    let human_key = format!("{synth_key}@human");
    let outcomes = for_each_record(records, cfg.jobs, |r| {
        let Some(q) = r.query_labeled.clone() else {
            fail(r, STEP, "missing query_labeled");
            return Outcome::Failed;
        };
        let targets = [
            (synth_key.as_str(), r.nl_synth.clone()),
            (human_key.as_str(), r.nl_human.clone()),
        ];
        let mut any_done = false;
        let mut errors = Vec::new();
        for (key, text) in targets {
            let Some(t) = text else { continue };
            let step_key = format!("{STEP}:{key}");
            let digest = json_digest(&json!({"step": STEP, "scorer": scorer.identity, "query": q, "text": t}));
            if !(up_to_date(r, &step_key, &digest) && r.scores.contains_key(key)) {
                match scorer.score(&q, &t, tau) {
                    Ok(s) => {
                        r.scores.insert(key.to_string(), s.value);
                        r.provenance.insert(step_key, stamp(cfg, None, digest, &[]));
                        any_done = true;
                    }
                    Err(e) => {
                        r.scores.remove(key);
                        r.decisions.remove(key);
                        errors.push(format!("{key}: {e}"));
                        continue;
                    }
                }
            }
            let v = r.scores[key];
            r.decisions
                .insert(key.to_string(), qnl_core::verifier::is_correct(v, tau));
        }
        if r.nl_synth.is_none() {
            errors.insert(0, "missing nl_synth".into());
        }
        if errors.is_empty() {
            r.failures.remove(STEP);
            if any_done {
                Outcome::Done
            } else {
                Outcome::Skipped
            }
        } else {
            fail(r, STEP, errors.join("; "));
            Outcome::Failed
        }
    })?;
    Ok(tally(STEP, &outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterSummary {
    pub backend: String,
    pub tau: f64,
    pub before: usize,
    pub after: usize,
    pub retention: f64,
    pub acc_before: Option<f64>,
    pub acc_after: Option<f64>,
}

impl FilterSummary {
    /// Before/after/retention block in the layout of a filtering table.
    pub fn render(&self) -> String {
        let acc = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let mut out = String::new();
        let _ = writeln!(out, "backend    {} (tau = {:.2})", self.backend, self.tau);
        let _ = writeln!(out, "before     {:>6}  acc {}", self.before, acc(self.acc_before));
        let _ = writeln!(out, "after      {:>6}  acc {}", self.after, acc(self.acc_after));
        let _ = writeln!(out, "retention  {:.4} ({:.0}%)", self.retention, self.retention * 100.0);
        out
    }
}

fn manual_accuracy(records: &[QnlRecord]) -> Option<f64> {
    let labeled: Vec<bool> = records.iter().filter_map(|r| r.manual_label).collect();
    (!labeled.is_empty()).then(|| labeled.iter().filter(|&&b| b).count() as f64 / labeled.len() as f64)
}

/// Splits on `score >= tau` (default 0.6).
pub fn cmd_filter(
    records: &[QnlRecord],
    backend: &str,
    tau: Option<f64>,
) -> Result<(FilterOutcome, FilterSummary), PipelineError> {
    let tau = tau.unwrap_or(DEFAULT_FILTER_TAU);
    if !(0.0..=1.0).contains(&tau) {
        return Err(PipelineError::Config(format!("tau {tau} outside [0, 1]")));
    }
    let outcome = filter_dataset(records, backend, tau)?;
    let summary = FilterSummary {
        backend: backend.to_string(),
        tau,
        before: records.len(),
        after: outcome.kept.len(),
        retention: outcome.retention,
        acc_before: manual_accuracy(records),
        acc_after: manual_accuracy(&outcome.kept),
    };
    Ok((outcome, summary))
}

/// Builds training pairs and fits the classifier head on them.
pub fn cmd_train_head(
    records: &[QnlRecord],
    cfg: &RunConfig,
    policy: NegativePolicy,
    hyper: &HeadHyper,
) -> Result<qnl_core::verifier::TrainedHead, PipelineError> {
    let pairs = build_training_pairs(records, policy, cfg.seed)?;
    let embedder = open_embedder(&cfg.verifier.embedder)?;
    let digest = json_digest(&json!({
        "step": "train-head",
        "embedder": cfg.verifier.embedder,
        "hyper": hyper,
        "policy": policy,
        "pairs": pairs,
    }));
    let stamp = stamp(cfg, Some(embedder.source_id()), digest, &[]);
    Ok(scoring::train_head(&pairs, embedder.as_ref(), hyper, stamp)?)
}
