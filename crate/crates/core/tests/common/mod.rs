//! Independent oracles and fixture generators shared by the integration
//! tests and the acceptance runner. The oracles never call the code under
//! test; `fir` holds the scripted refinement fixture.
#![allow(dead_code)]

pub mod fir;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use ttprompt::corpus::{AnnotatedDoc, EntityMention, EntitySet, LabelSchema};
use ttprompt::retrieval::{EmbeddedPool, PoolEntry};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn toy_dir() -> PathBuf {
    data_dir().join("toy")
}

pub fn reference_dir() -> PathBuf {
    data_dir().join("reference")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn type_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("T{i}")).collect()
}

pub fn set_of(pairs: &[(String, String)]) -> EntitySet {
    let mut s = EntitySet::new();
    for (span, ty) in pairs {
        s.insert(EntityMention::new(span.clone(), ty.clone()));
    }
    s
}

/// Gold and predictions over a tiny vocabulary so collisions are common.
pub struct MetricsFixture {
    pub schema: LabelSchema,
    pub gold: Vec<AnnotatedDoc>,
    pub predictions: BTreeMap<String, EntitySet>,
}

pub fn metrics_fixture(r: &mut ChaCha8Rng) -> MetricsFixture {
    let n_types = r.random_range(1..=5);
    let types = type_names(n_types);
    let vocab: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
    let n_docs = r.random_range(1..=10);
    let mut gold = Vec::new();
    let mut predictions = BTreeMap::new();
    for d in 0..n_docs {
        let draw = |r: &mut ChaCha8Rng| -> Vec<(String, String)> {
            (0..r.random_range(0..=4))
                .map(|_| {
                    (
                        vocab[r.random_range(0..vocab.len())].clone(),
                        types[r.random_range(0..types.len())].clone(),
                    )
                })
                .collect()
        };
        let g = draw(r);
        let text = vocab.join(" ");
        gold.push(AnnotatedDoc::new(format!("d{d}"), text, set_of(&g)));
        predictions.insert(format!("d{d}"), set_of(&draw(r)));
    }
    MetricsFixture {
        schema: LabelSchema::from_names("fx", &types).unwrap(),
        gold,
        predictions,
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Per-type TP/FP/FN by scanning every predicted and gold pair in lists.
pub fn brute_force_counts(
    predictions: &BTreeMap<String, EntitySet>,
    gold: &[AnnotatedDoc],
) -> BTreeMap<String, Tally> {
    let mut out: BTreeMap<String, Tally> = BTreeMap::new();
    for doc in gold {
        let p: Vec<(String, String)> = predictions[&doc.id]
            .iter()
            .map(|m| (m.span.clone(), m.entity_type.clone()))
            .collect();
        let g: Vec<(String, String)> = doc.gold.iter().map(|m| (m.span.clone(), m.entity_type.clone())).collect();
        for x in &p {
            let t = out.entry(x.1.clone()).or_default();
            if g.iter().any(|y| y == x) {
                t.tp += 1;
            } else {
                t.fp += 1;
            }
        }
        for y in &g {
            if !p.iter().any(|x| x == y) {
                out.entry(y.1.clone()).or_default().fn_ += 1;
            }
        }
    }
    out
}

pub fn oracle_f1(t: Tally) -> f64 {
    let p = if t.tp + t.fp == 0 { 0.0 } else { t.tp as f64 / (t.tp + t.fp) as f64 };
    let r = if t.tp + t.fn_ == 0 { 0.0 } else { t.tp as f64 / (t.tp + t.fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// (micro, macro) where macro runs over types present in gold.
pub fn oracle_scores(counts: &BTreeMap<String, Tally>, gold: &[AnnotatedDoc]) -> (f64, f64) {
    let mut total = Tally::default();
    for t in counts.values() {
        total.tp += t.tp;
        total.fp += t.fp;
        total.fn_ += t.fn_;
    }
    let gold_types: BTreeSet<String> = gold.iter().flat_map(|d| d.gold.iter().map(|m| m.entity_type.clone())).collect();
    let per: Vec<f64> = gold_types
        .iter()
        .map(|ty| counts.get(ty).copied().map(oracle_f1).unwrap_or(0.0))
        .collect();
    let macro_f1 = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (oracle_f1(total), macro_f1)
}

/// Pool with coarse vectors and small entity counts so score ties are frequent.
pub fn random_pool(r: &mut ChaCha8Rng, n: usize, dim: usize, n_types: usize) -> EmbeddedPool {
    let types = type_names(n_types);
    let entries = (0..n)
        .map(|i| {
            let vector: Vec<f32> = (0..dim).map(|_| r.random_range(-2i32..=2) as f32).collect();
            let mut gold = EntitySet::new();
            for j in 0..r.random_range(0..=4) {
                gold.insert(EntityMention::new(format!("e{i}_{j}"), types[r.random_range(0..n_types)].clone()));
            }
            let text = gold.iter().map(|m| m.span.clone()).collect::<Vec<_>>().join(" ");
            let doc = AnnotatedDoc::new(format!("p{i}"), text, gold);
            PoolEntry {
                types: doc.gold.iter().map(|m| m.entity_type.clone()).collect(),
                entity_count: doc.gold.len(),
                vector,
                doc,
            }
        })
        .collect();
    EmbeddedPool {
        entries,
        embedding_model_id: "grid".into(),
    }
}

pub fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Full sort by score descending, index ascending; the first `k` indices.
pub fn exhaustive_top_k(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut all = scores.to_vec();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Σ_i Σ_j |x_i - x_j| / (2 n Σx).
pub fn gini_pairwise(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let total: f64 = x.iter().sum();
    let mut acc = 0.0;
    for a in x {
        for b in x {
            acc += (a - b).abs();
        }
    }
    acc / (2.0 * n * total)
}

/// Synthetic corpus with skewed, multi-label type frequencies.
pub fn synthetic_corpus(r: &mut ChaCha8Rng, n_docs: usize, n_types: usize) -> Vec<AnnotatedDoc> {
    let types = type_names(n_types);
    let weights: Vec<f64> = (0..n_types).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let total: f64 = weights.iter().sum();
    (0..n_docs)
        .map(|i| {
            let mut gold = EntitySet::new();
            let k = r.random_range(0..=3);
            for j in 0..k {
                let mut u = r.random::<f64>() * total;
                let mut t = 0;
                while u > weights[t] && t + 1 < n_types {
                    u -= weights[t];
                    t += 1;
                }
                gold.insert(EntityMention::new(format!("s{i}_{j}"), types[t].clone()));
            }
            let text = gold.iter().map(|m| m.span.clone()).collect::<Vec<_>>().join(" ");
            AnnotatedDoc::new(format!("doc{i}"), text, gold)
        })
        .collect()
}

/// Docs containing each type.
pub fn docs_per_type(docs: &[AnnotatedDoc]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for d in docs {
        let types: BTreeSet<&str> = d.gold.iter().map(|x| x.entity_type.as_str()).collect();
        for t in types {
            *m.entry(t.to_string()).or_insert(0) += 1;
        }
    }
    m
}

pub fn f1_rows() -> BTreeMap<String, BTreeMap<String, ttprompt::metrics::F1Pair>> {
    let raw = std::fs::read_to_string(reference_dir().join("f1_results.json")).unwrap();
    serde_json::from_str(&raw).unwrap()
}

pub fn difficulty_rows() -> Vec<(String, [f64; 6])> {
    #[derive(serde::Deserialize)]
    struct Row {
        dataset: String,
        values: [f64; 6],
    }
    let raw = std::fs::read_to_string(reference_dir().join("difficulty_rows.json")).unwrap();
    let rows: Vec<Row> = serde_json::from_str(&raw).unwrap();
    rows.into_iter().map(|r| (r.dataset, r.values)).collect()
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_ttprompt"))
}
