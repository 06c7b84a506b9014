//! Embedding providers behind one trait.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use qnl_core::verifier::{mock_embedding, Embedding};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::sha256_hex;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Request(String),
    #[error("no embedding for text digest {0}")]
    Unknown(String),
    #[error("expected dimension {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    UnitLength,
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn source_id(&self) -> &str;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError>;

    fn embed_one(&self, text: &str) -> Result<Embedding, EmbedError> {
        Ok(self.embed(&[text])?.remove(0))
    }
}

fn finish(values: Vec<f64>, dim: usize, source: &str, norm: Normalization) -> Result<Embedding, EmbedError> {
    if values.len() != dim {
        return Err(EmbedError::Dim {
            expected: dim,
            got: values.len(),
        });
    }
    let e = Embedding::new(values, source).map_err(|_| EmbedError::NonFinite)?;
    Ok(match norm {
        Normalization::None => e,
        Normalization::UnitLength => e.normalized(),
    })
}

/// Hash-based stand-in; output depends only on text, dim and seed.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    id: String,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            id: format!("mock:{dim}:{seed}"),
        }
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                finish(
                    mock_embedding(t, self.dim, self.seed),
                    self.dim,
                    &self.id,
                    Normalization::None,
                )
            })
            .collect()
    }
}

/// Key for precomputed embeddings: SHA-256 of the UTF-8 text.
pub fn text_digest(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpRow {
    pub digest: String,
    pub vector: Vec<f64>,
}

/// Looks vectors up in a JSON Lines dump of `{digest, vector}` rows.
#[derive(Debug, Clone)]
pub struct FileLookupEmbedder {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    norm: Normalization,
    id: String,
}

impl FileLookupEmbedder {
    pub fn open(path: &Path, norm: Normalization) -> Result<Self, EmbedError> {
        let file_err = |message: String| EmbedError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: DumpRow = serde_json::from_str(line).map_err(|e| file_err(format!("line {}: {e}", i + 1)))?;
            match dim {
                None => dim = Some(row.vector.len()),
                Some(d) if d != row.vector.len() => {
                    return Err(EmbedError::Dim {
                        expected: d,
                        got: row.vector.len(),
                    })
                }
                _ => {}
            }
            vectors.insert(row.digest, row.vector);
        }
        let dim = dim.ok_or_else(|| file_err("no rows".into()))?;
        Ok(Self {
            dim,
            vectors,
            norm,
            id: format!("file:{}", path.display()),
        })
    }
}

impl EmbeddingProvider for FileLookupEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                let d = text_digest(t);
                let v = self.vectors.get(&d).ok_or(EmbedError::Unknown(d))?;
                finish(v.clone(), self.dim, &self.id, self.norm)
            })
            .collect()
    }
}

/// `POST {url}` with `{"texts": [...]}`, expecting `{"vectors": [[...]]}`.
pub struct HttpEmbedder {
    url: String,
    dim: usize,
    norm: Normalization,
    agent: ureq::Agent,
    id: String,
}

impl HttpEmbedder {
    pub fn new(url: &str, dim: usize, norm: Normalization, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        Self {
            url: url.to_string(),
            dim,
            norm,
            agent,
            id: format!("http:{url}"),
        }
    }
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(json!({ "texts": texts }))
            .map_err(|e| EmbedError::Request(e.to_string()))?;
        let body: VectorsResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Request(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbedError::Request(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| finish(v, self.dim, &self.id, self.norm))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_lookup_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let rows = [
            DumpRow {
                digest: text_digest("a"),
                vector: vec![3.0, 4.0],
            },
            DumpRow {
                digest: text_digest("b"),
                vector: vec![1.0, 0.0],
            },
        ];
        let text: String = rows.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        fs::write(&path, text).unwrap();
        let p = FileLookupEmbedder::open(&path, Normalization::UnitLength).unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(p.embed_one("a").unwrap().values, vec![0.6, 0.8]);
        assert!(matches!(p.embed_one("zzz"), Err(EmbedError::Unknown(_))));
    }

    #[test]
    fn mock_dims() {
        let m = MockEmbedder::new(768, 0);
        assert_eq!(m.embed_one("hello").unwrap().dim(), 768);
    }
}
