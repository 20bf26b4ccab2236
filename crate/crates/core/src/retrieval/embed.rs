//! Text embedding backends: a deterministic hashing embedder for offline
//! runs, a closure adapter for scripted tests, an OpenAI-compatible HTTP
//! client, and a content-addressed disk cache in front of any of them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding service: {0}")]
    Service(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding service returned {got} vectors for {expected} inputs")]
    Count { expected: usize, got: usize },
    #[error("embedding cache {path}: {message}")]
    Cache { path: String, message: String },
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;

    /// One vector per input text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbeddingError>;

    fn embed_one(&self, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        let mut out = self.embed(&[text])?;
        out.pop().ok_or(EmbeddingError::Count {
            expected: 1,
            got: 0,
        })
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        (**self).embed(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        (**self).embed(texts)
    }
}

/// Feature-hashed bag of lowercase word unigrams and character trigrams.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    id: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder {
            dim,
            id: format!("mock-hash-{dim}"),
        }
    }

    fn bucket(&self, feature: &str) -> (usize, f32) {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in feature.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        ((h % self.dim as u64) as usize, sign)
    }

    fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        let lower = text.to_lowercase();
        for word in lower.split_whitespace() {
            let (i, s) = self.bucket(word);
            v[i] += s;
        }
        let chars: Vec<char> = lower.chars().collect();
        for w in chars.windows(3) {
            let gram: String = w.iter().collect();
            let (i, s) = self.bucket(&gram);
            v[i] += 0.5 * s;
        }
        v
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

impl Embedder for HashingEmbedder {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Wraps a per-text closure as an embedder.
pub struct FnEmbedder<F> {
    id: String,
    f: F,
}

impl<F> FnEmbedder<F>
where
    F: Fn(&str) -> Result<Vec<f32>, EmbeddingError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnEmbedder { id: id.into(), f }
    }
}

impl<F> Embedder for FnEmbedder<F>
where
    F: Fn(&str) -> Result<Vec<f32>, EmbeddingError> + Send + Sync,
{
    fn model_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        texts.iter().map(|t| (self.f)(t)).collect()
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

/// Client for an OpenAI-compatible `/embeddings` endpoint:
/// `{"model","input"}` in, `{"data":[{"embedding":[..]}]}` out.
pub struct HttpEmbedder {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        HttpEmbedder {
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client builds"),
        }
    }

    /// `$LLM_API_BASE/embeddings` with `$LLM_API_KEY`, if the base is set.
    pub fn from_env(model: impl Into<String>) -> Option<Self> {
        let base = std::env::var("LLM_API_BASE").ok()?;
        let key = std::env::var("LLM_API_KEY").ok();
        Some(Self::new(
            format!("{}/embeddings", base.trim_end_matches('/')),
            model,
            key,
        ))
    }
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        let mut req = self.client.post(&self.endpoint).json(&EmbeddingRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| EmbeddingError::Service(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(EmbeddingError::Service(format!("HTTP {status}: {body}")));
        }
        let mut parsed: EmbeddingResponse = resp
            .json()
            .map_err(|e| EmbeddingError::Service(format!("bad response body: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(EmbeddingError::Count {
                expected: texts.len(),
                got: parsed.data.len(),
            });
        }
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

/// Disk cache at `<root>/emb/<model>/<sha256(text)>.json` in front of another embedder.
pub struct CachedEmbedder<E> {
    inner: E,
    dir: PathBuf,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, cache_root: &Path) -> Self {
        let model_dir = inner.model_id().replace(['/', '\\', ':'], "_");
        let dir = cache_root.join("emb").join(model_dir);
        CachedEmbedder { inner, dir }
    }

    pub fn cache_dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, text: &str) -> PathBuf {
        self.dir
            .join(format!("{}.json", hex::encode(Sha256::digest(text.as_bytes()))))
    }

    fn cache_err(path: &Path, message: impl ToString) -> EmbeddingError {
        EmbeddingError::Cache {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        let mut misses = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            let path = self.path_for(text);
            match fs::read_to_string(&path) {
                Ok(raw) => {
                    out[i] = Some(
                        serde_json::from_str(&raw).map_err(|e| Self::cache_err(&path, e))?,
                    )
                }
                Err(_) => misses.push(i),
            }
        }
        if !misses.is_empty() {
            let miss_texts: Vec<&str> = misses.iter().map(|&i| texts[i]).collect();
            let fresh = self.inner.embed(&miss_texts)?;
            if fresh.len() != misses.len() {
                return Err(EmbeddingError::Count {
                    expected: misses.len(),
                    got: fresh.len(),
                });
            }
            fs::create_dir_all(&self.dir).map_err(|e| Self::cache_err(&self.dir, e))?;
            for (&i, v) in misses.iter().zip(fresh) {
                let path = self.path_for(texts[i]);
                let raw = serde_json::to_string(&v).expect("vectors serialize");
                fs::write(&path, raw).map_err(|e| Self::cache_err(&path, e))?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn hashing_embedder_is_deterministic() {
        let e = HashingEmbedder::new(32);
        let a = e.embed_one("Emotet spreads via email").unwrap();
        let b = e.embed_one("Emotet spreads via email").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cache_serves_repeat_requests() {
        let dir = tempfile::tempdir().unwrap();
        let calls = AtomicUsize::new(0);
        let inner = FnEmbedder::new("org/model", |t: &str| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(vec![t.len() as f32, 0.0])
        });
        let cached = CachedEmbedder::new(inner, dir.path());
        assert!(cached.cache_dir().ends_with("emb/org_model"));
        let first = cached.embed(&["abc", "de"]).unwrap();
        let second = cached.embed(&["de", "abc", "xyzw"]).unwrap();
        assert_eq!(first, vec![vec![3.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(second, vec![vec![2.0, 0.0], vec![3.0, 0.0], vec![4.0, 0.0]]);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let files = fs::read_dir(cached.cache_dir()).unwrap().count();
        assert_eq!(files, 3);
    }
}
