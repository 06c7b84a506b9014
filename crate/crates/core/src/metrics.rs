//! Reference-based text metrics and threshold evaluation.
//!
//! BLEU and ROUGE-L share [`text_tokens`]: lowercase, every non-alphanumeric
//! non-space character becomes its own token, then split on whitespace.
//! Values are only comparable under this tokenizer.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("{0} tokenizes to an empty sequence")]
    EmptyTokens(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("{0} input is constant")]
    Constant(&'static str),
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    RougeL,
    Levenshtein,
    EmbedScore,
    Verifier,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        self != Metric::Levenshtein
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::RougeL => "rouge_l",
            Metric::Levenshtein => "levenshtein",
            Metric::EmbedScore => "embed_score",
            Metric::Verifier => "verifier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
    pub higher_is_better: bool,
}

impl MetricValue {
    pub fn new(metric: Metric, value: f64) -> Self {
        Self {
            metric,
            value,
            higher_is_better: metric.higher_is_better(),
        }
    }
}

/// Lowercased word and punctuation tokens.
pub fn text_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(core::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Character edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU with clipped n-gram precisions for `n = 1..=max_n`.
///
/// A zero match count at order `n >= 2` is smoothed to `1 / (total + 1)`.
/// Zero unigram overlap gives exactly 0.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> Result<f64, MetricError> {
    let cand = text_tokens(candidate);
    let refs = text_tokens(reference);
    if cand.is_empty() {
        return Err(MetricError::EmptyTokens("candidate"));
    }
    if refs.is_empty() {
        return Err(MetricError::EmptyTokens("reference"));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n.max(1) {
        let cand_counts = ngram_counts(&cand, n);
        let ref_counts = ngram_counts(&refs, n);
        let total: usize = cand_counts.values().sum();
        let matched: usize = cand_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += libm::log(precision);
    }
    let geo_mean = libm::exp(log_sum / max_n.max(1) as f64);
    let (c, r) = (cand.len() as f64, refs.len() as f64);
    let brevity = if c < r { libm::exp(1.0 - r / c) } else { 1.0 };
    Ok((geo_mean * brevity).clamp(0.0, 1.0))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1) over [`text_tokens`].
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64, MetricError> {
    let cand = text_tokens(candidate);
    let refs = text_tokens(reference);
    if cand.is_empty() {
        return Err(MetricError::EmptyTokens("candidate"));
    }
    if refs.is_empty() {
        return Err(MetricError::EmptyTokens("reference"));
    }
    let lcs = lcs_len(&cand, &refs);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / refs.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// 1-based ranks; ties share the mean of the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0)
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooFew {
            needed: 2,
            got: x.len(),
        });
    }
    if x.iter().all(|v| *v == x[0]) {
        return Err(MetricError::Constant("x"));
    }
    if y.iter().all(|v| *v == y[0]) {
        return Err(MetricError::Constant("y"));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Counts with positive class "correct translation".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Ratios derived from [`ConfusionCounts`]. `None` marks an undefined ratio
/// (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision_std: Option<f64>,
    pub recall_std: Option<f64>,
    /// Share of wrong translations that were flagged as wrong.
    pub precision_paper: Option<f64>,
    /// Share of correct translations that were accepted as correct.
    pub recall_paper: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Classifies each `(score, is_correct)` pair as correct when `score > tau`.
pub fn confusion_at_tau(scores: &[(f64, bool)], tau: f64) -> Result<ConfusionMetrics, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for &(value, correct) in scores {
        match (value > tau, correct) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(ConfusionMetrics {
        counts: c,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        precision_std: ratio(c.tp, c.tp + c.fp),
        recall_std: ratio(c.tp, c.tp + c.fn_),
        precision_paper: ratio(c.tn, c.tn + c.fp),
        recall_paper: ratio(c.tp, c.tp + c.fn_),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub correct: usize,
    pub wrong: usize,
}

/// Equal-width bins over `[0, 1]`; bins are left-closed, the last one is
/// closed on both ends. Values outside `[0, 1]` are clamped.
pub fn score_histogram(scores: &[(f64, bool)], bins: usize) -> Result<Vec<HistogramRow>, MetricError> {
    if bins < 2 {
        return Err(MetricError::TooFewBins(bins));
    }
    let mut rows: Vec<HistogramRow> = (0..bins)
        .map(|i| HistogramRow {
            bin_low: i as f64 / bins as f64,
            bin_high: (i + 1) as f64 / bins as f64,
            correct: 0,
            wrong: 0,
        })
        .collect();
    for &(value, correct) in scores {
        let v = value.clamp(0.0, 1.0);
        let mut idx = libm::floor(v * bins as f64) as usize;
        idx = idx.min(bins - 1);
        // keep bin membership consistent with the printed edges
        if idx > 0 && v < rows[idx].bin_low {
            idx -= 1;
        } else if idx + 1 < bins && v >= rows[idx].bin_high {
            idx += 1;
        }
        if correct {
            rows[idx].correct += 1;
        } else {
            rows[idx].wrong += 1;
        }
    }
    Ok(rows)
}
