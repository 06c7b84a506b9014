//! Verifier score math: cosine similarity, the frozen-embedding classifier
//! head, training losses and threshold decisions.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::text_tokens;
use crate::types::ProvenanceStamp;

pub const DEFAULT_DIM: usize = 768;
/// Threshold for classification metrics.
pub const DEFAULT_CLASSIFY_TAU: f64 = 0.5;
/// Threshold for dataset filtering.
pub const DEFAULT_FILTER_TAU: f64 = 0.6;
pub const DEFAULT_MARGIN: f64 = 0.5;
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifierError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding contains a non-finite entry")]
    NonFinite,
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("margin {0} outside (0, 1)")]
    InvalidMargin(f64),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {0} is not binary")]
    NonBinaryLabel(u8),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("head expects {expected} weights, has {got}")]
    WeightLength { expected: usize, got: usize },
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source_id: String,
}

impl Embedding {
    pub fn new(values: Vec<f64>, source_id: impl Into<String>) -> Result<Self, VerifierError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VerifierError::NonFinite);
        }
        Ok(Self {
            values,
            source_id: source_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(dot(&self.values, &self.values))
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= n);
        }
        self
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dot(a, b) / (|a| |b|)`, in `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, VerifierError> {
    cosine_slices(&a.values, &b.values)
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, VerifierError> {
    if a.len() != b.len() {
        return Err(VerifierError::DimMismatch(a.len(), b.len()));
    }
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return Err(VerifierError::ZeroVector);
    }
    // divide by each norm separately; the product of norms can underflow
    let c = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum::<f64>();
    Ok(c.clamp(-1.0, 1.0))
}

/// Maps a cosine into `[0, 1]` by clamping negatives to zero.
pub fn unit_score(cosine: f64) -> f64 {
    cosine.clamp(0.0, 1.0)
}

/// A score with its backend and threshold decision (`value > threshold`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierScore {
    pub value: f64,
    pub backend: String,
    pub threshold: f64,
    pub decision: bool,
}

impl VerifierScore {
    pub fn new(value: f64, backend: impl Into<String>, threshold: f64) -> Result<Self, VerifierError> {
        check_tau(threshold)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(VerifierError::ScoreOutOfRange(value));
        }
        Ok(Self {
            value,
            backend: backend.into(),
            threshold,
            decision: is_correct(value, threshold),
        })
    }
}

pub fn check_tau(tau: f64) -> Result<(), VerifierError> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(VerifierError::InvalidThreshold(tau))
    }
}

/// Classification rule: a translation is judged correct when `score > tau`.
pub fn is_correct(score: f64, tau: f64) -> bool {
    score > tau
}

/// Filtering rule: records scoring below `tau` are dropped, so `score == tau`
/// is kept.
pub fn passes_filter(score: f64, tau: f64) -> bool {
    score >= tau
}

/// Cosine score of two precomputed embeddings.
pub fn score_bi(query: &Embedding, text: &Embedding, tau: f64) -> Result<VerifierScore, VerifierError> {
    VerifierScore::new(unit_score(cosine(query, text)?), "bi", tau)
}

/// Logistic-regression head over `[e_q, e_t, |e_q - e_t|, e_q * e_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_on: Option<ProvenanceStamp>,
}

impl HeadModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; 4 * dim],
            bias: 0.0,
            dim,
            trained_on: None,
        }
    }

    pub fn validate(&self) -> Result<(), VerifierError> {
        if self.weights.len() != 4 * self.dim {
            return Err(VerifierError::WeightLength {
                expected: 4 * self.dim,
                got: self.weights.len(),
            });
        }
        Ok(())
    }

    pub fn probability(&self, features: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, features) + self.bias)
    }

    pub fn score(&self, query: &Embedding, text: &Embedding, tau: f64) -> Result<VerifierScore, VerifierError> {
        self.validate()?;
        if query.dim() != self.dim {
            return Err(VerifierError::DimMismatch(self.dim, query.dim()));
        }
        let f = head_features(query, text)?;
        VerifierScore::new(self.probability(&f), "head", tau)
    }
}

/// Pair features `[e_q, e_t, |e_q - e_t|, e_q * e_t]`, length `4 * dim`.
pub fn head_features(query: &Embedding, text: &Embedding) -> Result<Vec<f64>, VerifierError> {
    let (q, t) = (&query.values, &text.values);
    if q.len() != t.len() {
        return Err(VerifierError::DimMismatch(q.len(), t.len()));
    }
    let mut f = Vec::with_capacity(4 * q.len());
    f.extend_from_slice(q);
    f.extend_from_slice(t);
    f.extend(q.iter().zip(t).map(|(a, b)| libm::fabs(a - b)));
    f.extend(q.iter().zip(t).map(|(a, b)| a * b));
    Ok(f)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

fn check_label(label: u8) -> Result<f64, VerifierError> {
    match label {
        0 => Ok(0.0),
        1 => Ok(1.0),
        other => Err(VerifierError::NonBinaryLabel(other)),
    }
}

/// Margin contrastive loss, mean of
/// `y (1 - c)^2 + (1 - y) max(0, c - m)^2`.
pub fn contrastive_loss(pairs: &[(f64, u8)], margin: f64) -> Result<f64, VerifierError> {
    if pairs.is_empty() {
        return Err(VerifierError::Empty);
    }
    if !(margin > 0.0 && margin < 1.0) {
        return Err(VerifierError::InvalidMargin(margin));
    }
    let mut sum = 0.0;
    for &(c, label) in pairs {
        let y = check_label(label)?;
        let pos = (1.0 - c) * (1.0 - c);
        let hinge = (c - margin).max(0.0);
        sum += y * pos + (1.0 - y) * hinge * hinge;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean binary cross-entropy with predictions clipped to `[eps, 1 - eps]`.
pub fn bce_loss(predictions: &[f64], labels: &[u8]) -> Result<f64, VerifierError> {
    if predictions.len() != labels.len() {
        return Err(VerifierError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(VerifierError::Empty);
    }
    let mut sum = 0.0;
    for (&p, &label) in predictions.iter().zip(labels) {
        let y = check_label(label)?;
        let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        sum -= y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p);
    }
    Ok(sum / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for HeadHyper {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// Feature rows and binary labels for head training.
#[derive(Debug, Clone)]
pub struct HeadData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub dim: usize,
}

impl HeadData {
    pub fn from_embeddings(pairs: &[(Embedding, Embedding, u8)]) -> Result<Self, VerifierError> {
        let first = pairs.first().ok_or(VerifierError::Empty)?;
        let dim = first.0.dim();
        let mut features = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for (q, t, y) in pairs {
            if q.dim() != dim {
                return Err(VerifierError::DimMismatch(dim, q.dim()));
            }
            check_label(*y)?;
            features.push(head_features(q, t)?);
            labels.push(*y);
        }
        Ok(Self { features, labels, dim })
    }
}

/// Mean log-loss of the head, computed as `softplus(z) - y z`.
pub fn head_objective(head: &HeadModel, data: &HeadData) -> f64 {
    let n = data.features.len() as f64;
    data.features
        .iter()
        .zip(&data.labels)
        .map(|(f, &y)| {
            let z = dot(&head.weights, f) + head.bias;
            softplus(z) - f64::from(y) * z
        })
        .sum::<f64>()
        / n
}

/// Analytic gradient of [`head_objective`]: `(weights, bias)`.
pub fn head_gradient(head: &HeadModel, data: &HeadData) -> (Vec<f64>, f64) {
    let n = data.features.len() as f64;
    let mut gw = vec![0.0; head.weights.len()];
    let mut gb = 0.0;
    for (f, &y) in data.features.iter().zip(&data.labels) {
        let r = head.probability(f) - f64::from(y);
        for (g, x) in gw.iter_mut().zip(f) {
            *g += r * x;
        }
        gb += r;
    }
    gw.iter_mut().for_each(|g| *g /= n);
    (gw, gb / n)
}

/// Result of [`train_head`]: the final model and the objective before each
/// epoch's update.
#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub model: HeadModel,
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent from an all-zero head.
pub fn train_head(data: &HeadData, hyper: &HeadHyper) -> Result<TrainedHead, VerifierError> {
    if data.labels.len() < 2 {
        return Err(VerifierError::Empty);
    }
    let positives = data.labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == data.labels.len() {
        return Err(VerifierError::SingleClass);
    }
    let mut model = HeadModel::zeros(data.dim);
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let loss = head_objective(&model, data);
        if !loss.is_finite() {
            return Err(VerifierError::NonFiniteLoss(epoch));
        }
        loss_trace.push(loss);
        let (gw, gb) = head_gradient(&model, data);
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= hyper.learning_rate * g;
        }
        model.bias -= hyper.learning_rate * gb;
    }
    Ok(TrainedHead { model, loss_trace })
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stand-in embedding: each token of [`text_tokens`] maps to a
/// seeded pseudo-random direction, the token multiset is summed and the sum
/// is scaled to unit length. Texts sharing most tokens get nearby vectors.
pub fn mock_embedding(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let tokens = text_tokens(text);
    let mut add = |token: &[u8]| {
        let mut state = fnv1a(seed, token);
        for v in acc.iter_mut() {
            let bits = splitmix64(&mut state) >> 11;
            *v += (bits as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
        }
    };
    if tokens.is_empty() {
        add(text.as_bytes());
    } else {
        tokens.iter().for_each(|t| add(t.as_bytes()));
    }
    let norm = libm::sqrt(dot(&acc, &acc));
    if norm > 0.0 {
        acc.iter_mut().for_each(|v| *v /= norm);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec(), "t").unwrap()
    }

    #[test]
    fn cosine_cases() {
        let a = emb(&[1.0, 2.0, 3.0]);
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let expected = 32.0 / (libm::sqrt(14.0) * libm::sqrt(77.0));
        assert!((cosine(&a, &emb(&[4.0, 5.0, 6.0])).unwrap() - expected).abs() < 1e-15);
        assert_eq!(cosine(&a, &emb(&[1.0])), Err(VerifierError::DimMismatch(3, 1)));
        assert_eq!(cosine(&a, &emb(&[0.0; 3])), Err(VerifierError::ZeroVector));
    }

    #[test]
    fn antipodal_clamps_to_zero() {
        let s = score_bi(&emb(&[1.0, -2.0]), &emb(&[-1.0, 2.0]), 0.5).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(!s.decision);
    }

    #[test]
    fn zero_head_gives_half() {
        let head = HeadModel::zeros(3);
        let s = head
            .score(&emb(&[1.0, 2.0, 3.0]), &emb(&[-1.0, 0.5, 0.0]), 0.5)
            .unwrap();
        assert_eq!(s.value, 0.5);
        assert!(!s.decision);
    }

    #[test]
    fn identical_inputs_zero_difference_block() {
        let a = emb(&[0.3, -0.4, 0.5]);
        let f = head_features(&a, &a).unwrap();
        assert_eq!(f.len(), 12);
        assert!(f[6..9].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn head_dim_mismatch() {
        let head = HeadModel::zeros(2);
        assert_eq!(
            head.score(&emb(&[1.0, 2.0, 3.0]), &emb(&[1.0, 2.0, 3.0]), 0.5),
            Err(VerifierError::DimMismatch(2, 3))
        );
    }

    #[test]
    fn contrastive_cases() {
        assert_eq!(contrastive_loss(&[(1.0, 1)], 0.5).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&[(0.5, 0), (-0.3, 0)], 0.5).unwrap(), 0.0);
        let v = contrastive_loss(&[(0.8, 1), (0.9, 0)], 0.5).unwrap();
        assert!((v - 0.10).abs() < 1e-12);
        assert_eq!(contrastive_loss(&[], 0.5), Err(VerifierError::Empty));
    }

    #[test]
    fn bce_cases() {
        let v = bce_loss(&[0.5, 0.5], &[1, 0]).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(v <= -libm::log(1.0 - BCE_EPSILON) + 1e-15);
        let v = bce_loss(&[0.9, 0.2], &[1, 0]).unwrap();
        assert!((v - (-libm::log(0.9) - libm::log(0.8)) / 2.0).abs() < 1e-12);
        assert_eq!(bce_loss(&[0.5], &[1, 0]), Err(VerifierError::LengthMismatch(1, 2)));
    }

    #[test]
    fn zero_epochs_returns_zero_model() {
        let data = HeadData::from_embeddings(&[
            (emb(&[1.0, 0.0]), emb(&[1.0, 0.0]), 1),
            (emb(&[1.0, 0.0]), emb(&[0.0, 1.0]), 0),
        ])
        .unwrap();
        let hyper = HeadHyper {
            epochs: 0,
            ..HeadHyper::default()
        };
        let trained = train_head(&data, &hyper).unwrap();
        assert_eq!(trained.model, HeadModel::zeros(2));
        assert!(trained.loss_trace.is_empty());
    }

    #[test]
    fn single_class_rejected() {
        let data = HeadData::from_embeddings(&[
            (emb(&[1.0, 0.0]), emb(&[1.0, 0.0]), 1),
            (emb(&[0.0, 1.0]), emb(&[0.0, 1.0]), 1),
        ])
        .unwrap();
        assert!(matches!(
            train_head(&data, &HeadHyper::default()),
            Err(VerifierError::SingleClass)
        ));
    }

    #[test]
    fn mock_embedding_is_unit_and_deterministic() {
        let a = mock_embedding("How many victories?", 64, 0);
        let b = mock_embedding("How many victories?", 64, 0);
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(a, mock_embedding("How many victories?", 64, 1));
    }

    #[test]
    fn thresholds() {
        assert!(passes_filter(0.6, 0.6));
        assert!(!is_correct(0.6, 0.6));
        assert!(VerifierScore::new(0.5, "x", 1.0).is_err());
        assert!(VerifierScore::new(1.2, "x", 0.5).is_err());
    }
}
