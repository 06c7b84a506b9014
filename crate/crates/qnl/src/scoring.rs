//! Verifier backends: bi-encoder cosine, classifier head, and artifacts
//! exported by the training component.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use qnl_core::verifier::{
    cosine, train_head as fit_head, unit_score, HeadData, HeadHyper, HeadModel, TrainedHead, VerifierError,
    VerifierScore,
};
use qnl_core::{ProvenanceStamp, TrainingPair};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::embed::{text_digest, EmbedError, EmbeddingProvider, FileLookupEmbedder, Normalization};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("checksum mismatch for {path}: manifest says {expected}, file has {actual}")]
    Checksum {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("unsupported artifact format `{0}`")]
    UnsupportedFormat(String),
    #[error("artifact adapter failed: {0}")]
    Adapter(String),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

fn nonempty(q: &str, t: &str) -> Result<(), ScoreError> {
    if q.trim().is_empty() {
        return Err(ScoreError::EmptyInput("query"));
    }
    if t.trim().is_empty() {
        return Err(ScoreError::EmptyInput("text"));
    }
    Ok(())
}

/// Clamped cosine between the two texts' embeddings.
pub fn score_bi(
    query_labeled: &str,
    text: &str,
    provider: &dyn EmbeddingProvider,
    tau: f64,
) -> Result<VerifierScore, ScoreError> {
    nonempty(query_labeled, text)?;
    let v = provider.embed(&[query_labeled, text])?;
    Ok(VerifierScore::new(unit_score(cosine(&v[0], &v[1])?), "bi", tau)?)
}

pub fn score_head(
    query_labeled: &str,
    text: &str,
    provider: &dyn EmbeddingProvider,
    head: &HeadModel,
    tau: f64,
) -> Result<VerifierScore, ScoreError> {
    nonempty(query_labeled, text)?;
    if head.dim != provider.dim() {
        return Err(VerifierError::DimMismatch(head.dim, provider.dim()).into());
    }
    let v = provider.embed(&[query_labeled, text])?;
    Ok(head.score(&v[0], &v[1], tau)?)
}

/// Embeds both sides of every pair and fits the head.
pub fn train_head(
    pairs: &[TrainingPair],
    provider: &dyn EmbeddingProvider,
    hyper: &HeadHyper,
    stamp: ProvenanceStamp,
) -> Result<TrainedHead, ScoreError> {
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let v = provider.embed(&[&p.query_labeled, &p.text])?;
        let mut it = v.into_iter();
        rows.push((
            it.next().expect("two vectors"),
            it.next().expect("two vectors"),
            p.label,
        ));
    }
    let data = HeadData::from_embeddings(&rows)?;
    let mut trained = fit_head(&data, hyper)?;
    trained.model.trained_on = Some(stamp);
    Ok(trained)
}

pub fn load_head(path: &Path) -> Result<HeadModel, ScoreError> {
    let text = fs::read_to_string(path).map_err(|e| ScoreError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let head: HeadModel = serde_json::from_str(&text).map_err(|e| ScoreError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    head.validate()?;
    Ok(head)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    BiFinetuned,
    CrossFinetuned,
}

/// Describes an artifact produced by the training component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    /// Relative paths resolve against the manifest's directory.
    pub artifact_path: PathBuf,
    pub format_tag: String,
    pub dim: usize,
    pub backend_kind: BackendKind,
    /// SHA-256 of the artifact file, hex.
    pub checksum: String,
}

/// Separator placed between query and text for joint inputs.
pub const PAIR_SEPARATOR: &str = " [SEP] ";

/// Key for a `(query, text)` pair in a pair-score table.
pub fn pair_digest(query: &str, text: &str) -> String {
    sha256_hex(format!("{query}{PAIR_SEPARATOR}{text}").as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairScoreRow {
    pub digest: String,
    pub score: f64,
}

#[derive(Debug, Deserialize)]
struct ConstantArtifact {
    value: f64,
}

enum Adapter {
    Constant(f64),
    Embeddings(FileLookupEmbedder),
    PairScores(HashMap<String, f64>),
}

/// A loaded external artifact.
///
/// Supported `format_tag`s:
/// - `constant/v1`: `{"value": x}`, every pair scores `x`.
/// - `embedding-dump/v1`: `{digest, vector}` rows, scored by clamped cosine.
/// - `pair-scores/v1`: `{digest, score}` rows keyed by [`pair_digest`],
///   the joint-input model's own inference over known pairs.
pub struct ExternalModel {
    manifest: ModelManifest,
    adapter: Adapter,
}

impl ExternalModel {
    pub fn load(manifest_path: &Path) -> Result<Self, ScoreError> {
        let file_err = |p: &Path, message: String| ScoreError::File {
            path: p.display().to_string(),
            message,
        };
        let text = fs::read_to_string(manifest_path).map_err(|e| file_err(manifest_path, e.to_string()))?;
        let mut manifest: ModelManifest =
            serde_json::from_str(&text).map_err(|e| file_err(manifest_path, e.to_string()))?;
        if manifest.artifact_path.is_relative() {
            let base = manifest_path.parent().unwrap_or(Path::new("."));
            manifest.artifact_path = base.join(&manifest.artifact_path);
        }
        let artifact = &manifest.artifact_path;
        let bytes = fs::read(artifact).map_err(|e| file_err(artifact, e.to_string()))?;
        let actual = sha256_hex(&bytes);
        if !actual.eq_ignore_ascii_case(&manifest.checksum) {
            return Err(ScoreError::Checksum {
                path: artifact.display().to_string(),
                expected: manifest.checksum.clone(),
                actual,
            });
        }
        let text = || String::from_utf8(bytes.clone()).map_err(|e| ScoreError::Adapter(e.to_string()));
        let adapter = match manifest.format_tag.as_str() {
            "constant/v1" => {
                let c: ConstantArtifact =
                    serde_json::from_str(&text()?).map_err(|e| ScoreError::Adapter(e.to_string()))?;
                if !(0.0..=1.0).contains(&c.value) {
                    return Err(ScoreError::Adapter(format!("constant {} outside [0, 1]", c.value)));
                }
                Adapter::Constant(c.value)
            }
            "embedding-dump/v1" => {
                let e = FileLookupEmbedder::open(artifact, Normalization::None)?;
                if e.dim() != manifest.dim {
                    return Err(EmbedError::Dim {
                        expected: manifest.dim,
                        got: e.dim(),
                    }
                    .into());
                }
                Adapter::Embeddings(e)
            }
            "pair-scores/v1" => {
                let mut table = HashMap::new();
                for (i, line) in text()?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let row: PairScoreRow =
                        serde_json::from_str(line).map_err(|e| ScoreError::Adapter(format!("line {}: {e}", i + 1)))?;
                    table.insert(row.digest, row.score);
                }
                Adapter::PairScores(table)
            }
            other => return Err(ScoreError::UnsupportedFormat(other.to_string())),
        };
        Ok(Self { manifest, adapter })
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn score(&self, query_labeled: &str, text: &str, backend: &str, tau: f64) -> Result<VerifierScore, ScoreError> {
        nonempty(query_labeled, text)?;
        let value = match &self.adapter {
            Adapter::Constant(v) => *v,
            Adapter::Embeddings(e) => {
                let v = e.embed(&[query_labeled, text])?;
                unit_score(cosine(&v[0], &v[1])?)
            }
            Adapter::PairScores(table) => {
                let d = pair_digest(query_labeled, text);
                *table
                    .get(&d)
                    .ok_or_else(|| ScoreError::Adapter(format!("pair {d} not in score table")))?
            }
        };
        Ok(VerifierScore::new(value.clamp(0.0, 1.0), backend, tau)?)
    }
}

/// Convenience wrapper for a single call.
pub fn score_external(
    query_labeled: &str,
    text: &str,
    manifest_path: &Path,
    tau: f64,
) -> Result<VerifierScore, ScoreError> {
    ExternalModel::load(manifest_path)?.score(query_labeled, text, &external_backend_name(manifest_path), tau)
}

/// `external:<id>`, where the id is the directory holding the manifest, or
/// the manifest's file stem when that is not `manifest`.
pub fn external_backend_name(manifest_path: &Path) -> String {
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("artifact");
    let id = if stem == "manifest" {
        manifest_path
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or(stem)
    } else {
        stem
    };
    format!("external:{id}")
}

/// Digest of the text for dump lookups, re-exported for exporters.
pub fn embedding_key(text: &str) -> String {
    text_digest(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MockEmbedder;

    fn write_manifest(dir: &Path, tag: &str, artifact: &[u8], checksum: Option<&str>) -> PathBuf {
        fs::write(dir.join("model.artifact"), artifact).unwrap();
        let m = ModelManifest {
            artifact_path: "model.artifact".into(),
            format_tag: tag.into(),
            dim: 2,
            backend_kind: BackendKind::CrossFinetuned,
            checksum: checksum.map_or_else(|| sha256_hex(artifact), str::to_string),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        path
    }

    #[test]
    fn constant_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "constant/v1", br#"{"value":0.9}"#, None);
        let s = score_external("q", "t", &p, 0.5).unwrap();
        assert_eq!(s.value, 0.9);
        assert!(s.decision);
        assert!(s.backend.starts_with("external:"));
        assert_ne!(s.backend, "external:manifest");
    }

    #[test]
    fn corrupted_artifact_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "constant/v1", br#"{"value":0.9}"#, Some("00"));
        assert!(matches!(
            score_external("q", "t", &p, 0.5),
            Err(ScoreError::Checksum { .. })
        ));
    }

    #[test]
    fn unsupported_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "onnx", b"\x08\x01", None);
        assert!(matches!(
            score_external("q", "t", &p, 0.5),
            Err(ScoreError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn identical_strings_score_one() {
        let m = MockEmbedder::new(32, 0);
        let s = score_bi("How many?", "How many?", &m, 0.5).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12);
        assert!(s.decision);
    }

    #[test]
    fn head_dim_checked() {
        let m = MockEmbedder::new(8, 0);
        let head = HeadModel::zeros(4);
        assert!(matches!(
            score_head("a", "b", &m, &head, 0.5),
            Err(ScoreError::Verifier(VerifierError::DimMismatch(4, 8)))
        ));
        let head = HeadModel::zeros(8);
        assert_eq!(score_head("a", "b", &m, &head, 0.5).unwrap().value, 0.5);
    }
}
