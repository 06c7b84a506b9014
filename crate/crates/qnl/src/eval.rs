//! Labeled-set evaluation: per-model averages, confusion at τ, filtering
//! before/after, histograms and rank correlation against manual accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use qnl_core::metrics::{
    bleu, confusion_at_tau, levenshtein, rouge_l, score_histogram, spearman_rho, ConfusionMetrics, HistogramRow,
    MetricError,
};
use qnl_core::verifier::{cosine, passes_filter, unit_score};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_atomic, QnlRecord};
use crate::embed::{EmbedError, EmbeddingProvider};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no record carries a manual label")]
    NoLabels,
    #[error("record {uid}: {message}")]
    Record { uid: String, message: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Which text of each record is being judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    /// `nl_synth`, grouped by the translating model, with `nl_human` as
    /// the reference for the text metrics.
    #[default]
    Synth,
    /// `nl_human`, in a single group named `human`, scored under
    /// `<backend>@human`. No reference metrics.
    Human,
}

pub const HUMAN_GROUP: &str = "human";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub backends: Vec<String>,
    pub tau: f64,
    pub filter_tau: f64,
    pub bins: usize,
    pub target: EvalTarget,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            backends: Vec::new(),
            tau: qnl_core::verifier::DEFAULT_CLASSIFY_TAU,
            filter_tau: qnl_core::verifier::DEFAULT_FILTER_TAU,
            bins: 10,
            target: EvalTarget::Synth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub records: usize,
    pub labeled: usize,
    pub acc_manual: Option<f64>,
    pub avg_verifier: BTreeMap<String, f64>,
    pub avg_embed_score: Option<f64>,
    pub avg_bleu: Option<f64>,
    pub avg_rouge_l: Option<f64>,
    pub avg_levenshtein: Option<f64>,
    pub confusion: BTreeMap<String, ConfusionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub model: String,
    pub backend: String,
    pub before: usize,
    pub after: usize,
    pub acc_before: Option<f64>,
    pub acc_after: Option<f64>,
    pub retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    /// Group names in first-seen order.
    pub models: Vec<String>,
    pub per_model: BTreeMap<String, ModelEval>,
    /// Metric column to ρ against `acc_manual`; `None` when undefined.
    pub correlations: BTreeMap<String, Option<f64>>,
    pub histograms: BTreeMap<String, Vec<HistogramRow>>,
    pub filtering: Vec<FilterRow>,
}

type Column = Box<dyn Fn(&ModelEval) -> Option<f64>>;

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn group_of(r: &QnlRecord, target: EvalTarget) -> String {
    match target {
        EvalTarget::Human => HUMAN_GROUP.to_string(),
        EvalTarget::Synth => r
            .provenance
            .get("translate")
            .and_then(|p| p.model_id.clone())
            .unwrap_or_else(|| "unknown".to_string()),
    }
}

fn score_key(backend: &str, target: EvalTarget) -> String {
    match target {
        EvalTarget::Synth => backend.to_string(),
        EvalTarget::Human => format!("{backend}@human"),
    }
}

/// Cosine between embeddings of candidate and reference, clamped at zero.
pub fn embed_score(candidate: &str, reference: &str, provider: &dyn EmbeddingProvider) -> Result<f64, EvalError> {
    let v = provider.embed(&[candidate, reference])?;
    let c = cosine(&v[0], &v[1]).map_err(|e| EvalError::Record {
        uid: String::new(),
        message: e.to_string(),
    })?;
    Ok(unit_score(c))
}

struct RowMetrics {
    bleu: f64,
    rouge_l: f64,
    levenshtein: f64,
    embed: Option<f64>,
}

fn row_metrics(
    r: &QnlRecord,
    candidate: &str,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<Option<RowMetrics>, EvalError> {
    let Some(reference) = r.nl_human.as_deref().filter(|s| !s.trim().is_empty()) else {
        return Ok(None);
    };
    let rec_err = |message: String| EvalError::Record {
        uid: r.uid.clone(),
        message,
    };
    let embed = match provider {
        Some(p) => Some(embed_score(candidate, reference, p).map_err(|e| rec_err(e.to_string()))?),
        None => None,
    };
    Ok(Some(RowMetrics {
        bleu: bleu(candidate, reference, 4).map_err(|e| rec_err(e.to_string()))?,
        rouge_l: rouge_l(candidate, reference).map_err(|e| rec_err(e.to_string()))?,
        levenshtein: levenshtein(candidate, reference) as f64,
        embed,
    }))
}

pub fn evaluate(
    records: &[QnlRecord],
    opts: &EvalOptions,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<EvalReport, EvalError> {
    if !records.iter().any(|r| r.manual_label.is_some()) {
        return Err(EvalError::NoLabels);
    }
    let mut models: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&QnlRecord>> = BTreeMap::new();
    for r in records {
        let g = group_of(r, opts.target);
        if !groups.contains_key(&g) {
            models.push(g.clone());
        }
        groups.entry(g).or_default().push(r);
    }

    let mut per_model = BTreeMap::new();
    let mut filtering = Vec::new();
    let mut hist_input: BTreeMap<String, Vec<(f64, bool)>> = BTreeMap::new();

    for model in &models {
        let rows = &groups[model];
        let labeled: Vec<&QnlRecord> = rows.iter().copied().filter(|r| r.manual_label.is_some()).collect();
        let correct = |rs: &[&QnlRecord]| -> Option<f64> {
            (!rs.is_empty())
                .then(|| rs.iter().filter(|r| r.manual_label == Some(true)).count() as f64 / rs.len() as f64)
        };

        let (mut b, mut rl, mut lv, mut em) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        if opts.target == EvalTarget::Synth {
            for r in rows {
                let Some(cand) = r.nl_synth.as_deref().filter(|s| !s.trim().is_empty()) else {
                    continue;
                };
                if let Some(m) = row_metrics(r, cand, provider)? {
                    b.push(m.bleu);
                    rl.push(m.rouge_l);
                    lv.push(m.levenshtein);
                    if let Some(e) = m.embed {
                        em.push(e);
                    }
                }
            }
        }

        let mut avg_verifier = BTreeMap::new();
        let mut confusion = BTreeMap::new();
        for backend in &opts.backends {
            let key = score_key(backend, opts.target);
            let all: Vec<f64> = rows.iter().filter_map(|r| r.scores.get(&key).copied()).collect();
            if let Some(m) = mean(&all) {
                avg_verifier.insert(backend.clone(), m);
            }
            let pairs: Vec<(f64, bool)> = labeled
                .iter()
                .filter_map(|r| Some((*r.scores.get(&key)?, r.manual_label?)))
                .collect();
            if pairs.is_empty() {
                continue;
            }
            confusion.insert(backend.clone(), confusion_at_tau(&pairs, opts.tau)?);
            hist_input.entry(backend.clone()).or_default().extend(&pairs);

            let scored: Vec<&QnlRecord> = labeled
                .iter()
                .copied()
                .filter(|r| r.scores.contains_key(&key))
                .collect();
            let kept: Vec<&QnlRecord> = scored
                .iter()
                .copied()
                .filter(|r| passes_filter(r.scores[&key], opts.filter_tau))
                .collect();
            filtering.push(FilterRow {
                model: model.clone(),
                backend: backend.clone(),
                before: scored.len(),
                after: kept.len(),
                acc_before: correct(&scored),
                acc_after: correct(&kept),
                retention: (!scored.is_empty()).then(|| kept.len() as f64 / scored.len() as f64),
            });
        }

        per_model.insert(
            model.clone(),
            ModelEval {
                records: rows.len(),
                labeled: labeled.len(),
                acc_manual: correct(&labeled),
                avg_verifier,
                avg_embed_score: mean(&em),
                avg_bleu: mean(&b),
                avg_rouge_l: mean(&rl),
                avg_levenshtein: mean(&lv),
                confusion,
            },
        );
    }

    let mut histograms = BTreeMap::new();
    for (backend, pairs) in &hist_input {
        histograms.insert(backend.clone(), score_histogram(pairs, opts.bins)?);
    }

    let mut columns: Vec<(String, Column)> = Vec::new();
    for backend in &opts.backends {
        let b = backend.clone();
        columns.push((
            format!("verifier:{backend}"),
            Box::new(move |m| m.avg_verifier.get(&b).copied()),
        ));
    }
    columns.push(("embed_score".into(), Box::new(|m| m.avg_embed_score)));
    columns.push(("bleu".into(), Box::new(|m| m.avg_bleu)));
    columns.push(("rouge_l".into(), Box::new(|m| m.avg_rouge_l)));
    columns.push(("levenshtein".into(), Box::new(|m| m.avg_levenshtein)));
    let mut correlations = BTreeMap::new();
    for (name, get) in &columns {
        let (x, y): (Vec<f64>, Vec<f64>) = models
            .iter()
            .filter_map(|m| {
                let e = &per_model[m];
                Some((e.acc_manual?, get(e)?))
            })
            .unzip();
        correlations.insert(name.clone(), spearman_rho(&x, &y).ok());
    }

    Ok(EvalReport {
        options: opts.clone(),
        models,
        per_model,
        correlations,
        histograms,
        filtering,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Model rows with manual accuracy and metric averages, then a `rho` row.
    pub fn metrics_csv(&self) -> String {
        let backends = &self.options.backends;
        let mut out = String::from("model,acc_manual");
        for b in backends {
            let _ = write!(out, ",verifier:{b}");
        }
        out.push_str(",embed_score,bleu,rouge_l,levenshtein\n");
        for model in &self.models {
            let m = &self.per_model[model];
            out.push_str(model);
            out.push(',');
            out.push_str(&cell(m.acc_manual));
            for b in backends {
                let _ = write!(out, ",{}", cell(m.avg_verifier.get(b).copied()));
            }
            for v in [m.avg_embed_score, m.avg_bleu, m.avg_rouge_l, m.avg_levenshtein] {
                let _ = write!(out, ",{}", cell(v));
            }
            out.push('\n');
        }
        out.push_str("rho,-");
        let rho = |k: &str| self.correlations.get(k).copied().flatten();
        for b in backends {
            let _ = write!(out, ",{}", cell(rho(&format!("verifier:{b}"))));
        }
        for k in ["embed_score", "bleu", "rouge_l", "levenshtein"] {
            let _ = write!(out, ",{}", cell(rho(k)));
        }
        out.push('\n');
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("model,backend,n,tp,fp,tn,fn,acc,prec_std,rec_std,prec_paper,rec_paper\n");
        for model in &self.models {
            for (backend, c) in &self.per_model[model].confusion {
                let k = &c.counts;
                let _ = writeln!(
                    out,
                    "{model},{backend},{},{},{},{},{},{},{},{},{},{}",
                    k.total(),
                    k.tp,
                    k.fp,
                    k.tn,
                    k.fn_,
                    ratio(Some(c.accuracy)),
                    ratio(c.precision_std),
                    ratio(c.recall_std),
                    ratio(c.precision_paper),
                    ratio(c.recall_paper),
                );
            }
        }
        out
    }

    /// One block per backend with `before`, `after` and `retention` rows and
    /// one column per model.
    pub fn filtering_csv(&self) -> String {
        let mut out = String::from("backend,row");
        for m in &self.models {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for backend in &self.options.backends {
            let row = |m: &str| self.filtering.iter().find(|f| f.model == m && &f.backend == backend);
            type Getter = fn(&FilterRow) -> Option<f64>;
            let lines: [(&str, Getter); 3] = [
                ("before", |f| f.acc_before),
                ("after", |f| f.acc_after),
                ("retention", |f| f.retention),
            ];
            for (name, get) in lines {
                let _ = write!(out, "{backend},{name}");
                for m in &self.models {
                    let _ = write!(out, ",{}", cell(row(m).and_then(get)));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn histogram_csv(rows: &[HistogramRow]) -> String {
        let mut out = String::from("bin_low,bin_high,correct,wrong\n");
        for r in rows {
            let _ = writeln!(out, "{:.4},{:.4},{},{}", r.bin_low, r.bin_high, r.correct, r.wrong);
        }
        out
    }

    /// Writes `report.json`, the three tables and one histogram per backend.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<String>, EvalError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| EvalError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut files = vec![
            (
                "report.json".to_string(),
                serde_json::to_string_pretty(self).expect("report serializes") + "\n",
            ),
            ("table_metrics.csv".to_string(), self.metrics_csv()),
            ("table_confusion.csv".to_string(), self.confusion_csv()),
            ("table_filtering.csv".to_string(), self.filtering_csv()),
        ];
        for (backend, rows) in &self.histograms {
            let safe: String = backend
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            files.push((format!("histogram_{safe}.csv"), Self::histogram_csv(rows)));
        }
        let mut names = Vec::new();
        for (name, body) in files {
            let path = dir.join(&name);
            write_atomic(&path, body.as_bytes()).map_err(io(&path))?;
            names.push(name);
        }
        Ok(names)
    }
}
