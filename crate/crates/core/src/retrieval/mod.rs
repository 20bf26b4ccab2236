//! Demonstration retrieval for in-context NER.
//!
//! Three paradigms select `k` annotated docs from an embedded pool:
//!
//! * [`retrieve_semantic_knn`] ranks by cosine similarity of document
//!   embeddings and returns demos in ascending similarity, so the most
//!   similar demo ends up adjacent to the query in the prompt.
//! * [`retrieve_type_overlap`] ranks by how many gold entity types a demo
//!   shares with the query. It reads the query's gold labels, so it is an
//!   evaluation-only oracle and needs an explicit [`OracleAck`].
//! * [`retrieve_entity_density`] ignores the query and ranks by the number
//!   of gold mentions.
//!
//! All rankings break ties by ascending pool index.

mod embed;
mod prompt;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{typeset, AnnotatedDoc, EntitySet};

pub use embed::{
    cosine, CachedEmbedder, Embedder, EmbeddingError, FnEmbedder, HashingEmbedder, HttpEmbedder,
};
pub use prompt::{assemble_prompt, IclPrompt, PromptTemplate, TemplateError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding failed for doc {doc_id:?}: {source}")]
    EmbeddingService {
        doc_id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("embedding failed for query: {0}")]
    QueryEmbedding(#[source] EmbeddingError),
    #[error("embedding dimension mismatch: pool has {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub doc: AnnotatedDoc,
    pub vector: Vec<f32>,
    pub types: BTreeSet<String>,
    pub entity_count: usize,
}

/// Annotated docs with their embeddings, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedPool {
    pub entries: Vec<PoolEntry>,
    pub embedding_model_id: String,
}

impl EmbeddedPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.vector.len())
    }
}

const EMBED_BATCH: usize = 32;

/// Embeds every doc, issuing up to `parallelism` batch requests at once.
pub fn build_pool<E: Embedder + ?Sized>(
    docs: &[AnnotatedDoc],
    embedder: &E,
    parallelism: usize,
) -> Result<EmbeddedPool> {
    let batches: Vec<&[AnnotatedDoc]> = docs.chunks(EMBED_BATCH).collect();
    let workers = parallelism.max(1).min(batches.len().max(1));
    let mut results: Vec<Option<std::result::Result<Vec<Vec<f32>>, RetrievalError>>> =
        (0..batches.len()).map(|_| None).collect();

    let embed_batch = |batch: &[AnnotatedDoc]| {
        let texts: Vec<&str> = batch.iter().map(|d| d.text.as_str()).collect();
        embedder
            .embed(&texts)
            .and_then(|v| {
                if v.len() == texts.len() {
                    Ok(v)
                } else {
                    Err(EmbeddingError::Count {
                        expected: texts.len(),
                        got: v.len(),
                    })
                }
            })
            .map_err(|source| RetrievalError::EmbeddingService {
                doc_id: batch[0].id.clone(),
                source,
            })
    };

    if workers <= 1 {
        for (slot, batch) in results.iter_mut().zip(&batches) {
            *slot = Some(embed_batch(batch));
        }
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let batches = &batches;
                    let embed_batch = &embed_batch;
                    s.spawn(move || {
                        (w..batches.len())
                            .step_by(workers)
                            .map(|i| (i, embed_batch(batches[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("embedding worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }

    let mut entries = Vec::with_capacity(docs.len());
    let mut dim = None;
    for (batch, result) in batches.iter().zip(results) {
        let vectors = result.expect("every batch ran")?;
        for (doc, vector) in batch.iter().zip(vectors) {
            let expected = *dim.get_or_insert(vector.len());
            if vector.len() != expected || expected == 0 {
                return Err(RetrievalError::EmbeddingService {
                    doc_id: doc.id.clone(),
                    source: EmbeddingError::Dimension {
                        expected,
                        got: vector.len(),
                    },
                });
            }
            entries.push(PoolEntry {
                types: typeset(&doc.gold),
                entity_count: doc.gold.len(),
                doc: doc.clone(),
                vector,
            });
        }
    }
    Ok(EmbeddedPool {
        entries,
        embedding_model_id: embedder.model_id().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    SemanticKnn,
    TypeOverlap,
    EntityDensity,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [
        Paradigm::SemanticKnn,
        Paradigm::TypeOverlap,
        Paradigm::EntityDensity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::SemanticKnn => "semantic_knn",
            Paradigm::TypeOverlap => "type_overlap",
            Paradigm::EntityDensity => "entity_density",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown paradigm {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDemo {
    pub doc: AnnotatedDoc,
    pub score: f64,
    pub pool_index: usize,
}

/// The demonstrations chosen for one query.
///
/// Semantic demos are stored in ascending similarity (prompt order); the
/// other paradigms store rank order, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    pub demos: Vec<ScoredDemo>,
    pub paradigm: Paradigm,
    pub k: usize,
}

impl DemoSet {
    pub fn empty(paradigm: Paradigm) -> Self {
        DemoSet {
            demos: Vec::new(),
            paradigm,
            k: 0,
        }
    }

    /// Demos in the order they are placed in the prompt, least relevant
    /// first and most relevant last.
    pub fn prompt_order(&self) -> Vec<&ScoredDemo> {
        match self.paradigm {
            Paradigm::SemanticKnn => self.demos.iter().collect(),
            _ => self.demos.iter().rev().collect(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.demos.iter().map(|d| d.doc.id.as_str()).collect()
    }
}

/// Proof that the caller accepted the use of query gold labels.
#[derive(Debug, Clone, Copy)]
pub struct OracleAck(());

impl OracleAck {
    /// Only for evaluation runs: type-overlap retrieval reads the query's gold.
    pub fn acknowledge_gold_label_use() -> Self {
        OracleAck(())
    }
}

#[derive(PartialEq)]
struct Ranked {
    score: f64,
    index: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    /// Greater means better: higher score, then lower pool index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Best `k` of `(index, score)` pairs, best first.
fn top_k(scores: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
    for (index, score) in scores {
        let item = Ranked { score, index };
        if heap.len() < k {
            heap.push(Reverse(item));
        } else if let Some(Reverse(worst)) = heap.peek() {
            if item > *worst {
                heap.pop();
                heap.push(Reverse(item));
            }
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|Reverse(r)| (r.index, r.score))
        .collect()
}

fn candidates<'a>(
    pool: &'a EmbeddedPool,
    exclude_id: Option<&'a str>,
) -> impl Iterator<Item = (usize, &'a PoolEntry)> + 'a {
    pool.entries
        .iter()
        .enumerate()
        .filter(move |(_, e)| exclude_id != Some(e.doc.id.as_str()))
}

fn demo_set(pool: &EmbeddedPool, ranked: Vec<(usize, f64)>, paradigm: Paradigm, k: usize) -> DemoSet {
    DemoSet {
        demos: ranked
            .into_iter()
            .map(|(i, score)| ScoredDemo {
                doc: pool.entries[i].doc.clone(),
                score,
                pool_index: i,
            })
            .collect(),
        paradigm,
        k,
    }
}

/// Top-k by cosine similarity against a precomputed query vector, returned
/// in ascending similarity. `exclude_id` drops the query's own doc.
pub fn retrieve_semantic_knn_by_vector(
    pool: &EmbeddedPool,
    query_vector: &[f32],
    k: usize,
    exclude_id: Option<&str>,
) -> Result<DemoSet> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if let Some(dim) = pool.dim() {
        if dim != query_vector.len() {
            return Err(RetrievalError::Dimension {
                expected: dim,
                got: query_vector.len(),
            });
        }
    }
    let scores = candidates(pool, exclude_id).map(|(i, e)| (i, cosine(query_vector, &e.vector)));
    let mut ranked = top_k(scores, k);
    ranked.reverse();
    Ok(demo_set(pool, ranked, Paradigm::SemanticKnn, k))
}

pub fn retrieve_semantic_knn<E: Embedder + ?Sized>(
    pool: &EmbeddedPool,
    query_text: &str,
    k: usize,
    embedder: &E,
    exclude_id: Option<&str>,
) -> Result<DemoSet> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let v = embedder
        .embed_one(query_text)
        .map_err(RetrievalError::QueryEmbedding)?;
    retrieve_semantic_knn_by_vector(pool, &v, k, exclude_id)
}

/// Top-k by the number of entity types shared with the query's gold.
pub fn retrieve_type_overlap(
    pool: &EmbeddedPool,
    query_gold: &EntitySet,
    k: usize,
    exclude_id: Option<&str>,
    _ack: OracleAck,
) -> Result<DemoSet> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let query_types = typeset(query_gold);
    let scores = candidates(pool, exclude_id)
        .map(|(i, e)| (i, e.types.intersection(&query_types).count() as f64));
    Ok(demo_set(pool, top_k(scores, k), Paradigm::TypeOverlap, k))
}

/// Top-k by gold mention count, independent of the query.
pub fn retrieve_entity_density(
    pool: &EmbeddedPool,
    k: usize,
    exclude_id: Option<&str>,
) -> Result<DemoSet> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let scores = candidates(pool, exclude_id).map(|(i, e)| (i, e.entity_count as f64));
    Ok(demo_set(pool, top_k(scores, k), Paradigm::EntityDensity, k))
}
