//! Record model and dataset files.
//!
//! Datasets are either a JSON array or JSON Lines (one compact record per
//! line, LF endings). Fields this tool does not know about are kept in
//! [`QnlRecord::extra`] and written back unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use qnl_core::pairs::{derangement, retention, PairsError};
use qnl_core::rewrite::contains_absolute_iri;
use qnl_core::verifier::passes_filter;
use qnl_core::{DescriptionEntry, ProvenanceStamp, TrainingPair};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate uid(s): {}", .0.join(", "))]
    DuplicateUid(Vec<String>),
    #[error("record {uid}: invalid field `{field}`: {reason}")]
    Invalid { uid: String, field: String, reason: String },
    #[error("record {uid}: missing `{field}`")]
    MissingField { uid: String, field: &'static str },
    #[error("{0}")]
    Pairs(#[from] PairsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    JsonArray,
    Jsonl,
}

impl Format {
    /// `.jsonl` and `.ndjson` select JSON Lines, anything else a JSON array.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "ndjson") => Format::Jsonl,
            _ => Format::JsonArray,
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One benchmark row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QnlRecord {
    pub uid: String,
    pub query_raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_labeled: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub descriptions: Vec<DescriptionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nl_human: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nl_synth: Option<String>,
    /// The translation before reflection; equals `nl_synth` when reflection
    /// was off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nl_synth_first: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nl_negative: Option<String>,
    /// Backend name to score in `[0, 1]`. `<backend>` scores `nl_synth`,
    /// `<backend>@human` scores `nl_human`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub decisions: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual_label: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, ProvenanceStamp>,
    /// Step name to failure message for steps that could not complete.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<String, String>,
    /// Set when the translation reply needed sentence extraction and none
    /// ended in a question mark.
    #[serde(default, skip_serializing_if = "is_false")]
    pub reply_flagged: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl QnlRecord {
    pub fn new(uid: impl Into<String>, query_raw: impl Into<String>) -> Self {
        Self {
            uid: uid.into(),
            query_raw: query_raw.into(),
            query_labeled: None,
            descriptions: Vec::new(),
            nl_human: None,
            nl_synth: None,
            nl_synth_first: None,
            nl_negative: None,
            scores: BTreeMap::new(),
            decisions: BTreeMap::new(),
            manual_label: None,
            provenance: BTreeMap::new(),
            failures: BTreeMap::new(),
            reply_flagged: false,
            extra: Map::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |field: &str, reason: String| DatasetError::Invalid {
            uid: self.uid.clone(),
            field: field.to_string(),
            reason,
        };
        for (backend, &v) in &self.scores {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(&format!("scores.{backend}"), format!("{v} outside [0, 1]")));
            }
        }
        if let Some(q) = &self.query_labeled {
            if contains_absolute_iri(q) {
                return Err(invalid("query_labeled", "contains an absolute IRI".into()));
            }
        }
        for d in &self.descriptions {
            if d.label.is_empty() {
                return Err(invalid("descriptions", "empty label".into()));
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn check_unique(records: &[QnlRecord]) -> Result<(), DatasetError> {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for r in records {
        if !seen.insert(r.uid.as_str()) {
            dups.insert(r.uid.clone());
        }
    }
    if dups.is_empty() {
        Ok(())
    } else {
        Err(DatasetError::DuplicateUid(dups.into_iter().collect()))
    }
}

pub fn parse_dataset(text: &str, format: Format, origin: &str) -> Result<Vec<QnlRecord>, DatasetError> {
    let parse_err = |line: usize, column: usize, e: serde_json::Error| DatasetError::Parse {
        path: origin.to_string(),
        line,
        column,
        message: e.to_string(),
    };
    let records: Vec<QnlRecord> = match format {
        Format::JsonArray => serde_json::from_str(text).map_err(|e| parse_err(e.line(), e.column(), e))?,
        Format::Jsonl => {
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.column(), e))?);
            }
            out
        }
    };
    check_unique(&records)?;
    Ok(records)
}

/// Reads records in file order.
pub fn load_dataset(path: &Path, format: Format) -> Result<Vec<QnlRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_dataset(&text, format, &path.display().to_string())
}

pub fn render_dataset(records: &[QnlRecord], format: Format) -> Result<String, DatasetError> {
    for r in records {
        r.validate()?;
    }
    check_unique(records)?;
    let mut out = match format {
        Format::JsonArray => serde_json::to_string_pretty(records).expect("records serialize"),
        Format::Jsonl => records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes"))
            .collect::<Vec<_>>()
            .join("\n"),
    };
    if !out.is_empty() {
        out.push('\n');
    }
    Ok(out)
}

/// Validates and writes records, replacing `path` atomically.
pub fn save_dataset(records: &[QnlRecord], path: &Path, format: Format) -> Result<(), DatasetError> {
    let text = render_dataset(records, format)?;
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

/// Writes to a temporary file in the target directory, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativePolicy {
    /// Use each record's generated hard negative.
    Hard,
    /// Use another record's translation, chosen by a seeded derangement.
    Shuffled,
}

/// One positive and one negative pair per record.
pub fn build_training_pairs(
    records: &[QnlRecord],
    policy: NegativePolicy,
    seed: u64,
) -> Result<Vec<TrainingPair>, DatasetError> {
    let mut usable = Vec::with_capacity(records.len());
    for r in records {
        let missing = |field| DatasetError::MissingField {
            uid: r.uid.clone(),
            field,
        };
        let q = r
            .query_labeled
            .as_deref()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| missing("query_labeled"))?;
        let t = r
            .nl_synth
            .as_deref()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| missing("nl_synth"))?;
        let neg = match policy {
            NegativePolicy::Hard => Some(
                r.nl_negative
                    .as_deref()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| missing("nl_negative"))?,
            ),
            NegativePolicy::Shuffled => None,
        };
        usable.push((q, t, neg));
    }

    let pair = |q: &str, t: &str, label| TrainingPair {
        query_labeled: q.to_string(),
        text: t.to_string(),
        label,
    };
    let mut out = Vec::with_capacity(2 * usable.len());
    match policy {
        NegativePolicy::Hard => {
            for (q, t, neg) in &usable {
                out.push(pair(q, t, 1));
                out.push(pair(q, neg.expect("hard policy checked above"), 0));
            }
        }
        NegativePolicy::Shuffled => {
            let perm = derangement(usable.len(), seed)?;
            for (q, t, _) in &usable {
                out.push(pair(q, t, 1));
            }
            for (i, (q, _, _)) in usable.iter().enumerate() {
                out.push(pair(q, usable[perm[i]].1, 0));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<QnlRecord>,
    pub dropped: Vec<QnlRecord>,
    pub retention: f64,
}

/// Keeps records whose `backend` score is at least `tau`.
pub fn filter_dataset(records: &[QnlRecord], backend: &str, tau: f64) -> Result<FilterOutcome, DatasetError> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for r in records {
        let score = r.scores.get(backend).ok_or_else(|| DatasetError::Invalid {
            uid: r.uid.clone(),
            field: format!("scores.{backend}"),
            reason: "missing".into(),
        })?;
        if passes_filter(*score, tau) {
            kept.push(r.clone());
        } else {
            dropped.push(r.clone());
        }
    }
    let retention = retention(records.len(), kept.len())?;
    Ok(FilterOutcome {
        kept,
        dropped,
        retention,
    })
}
