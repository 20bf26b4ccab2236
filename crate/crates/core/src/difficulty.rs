//! Dataset difficulty index: six raw dimensions per dataset, min-max
//! normalized across a collection and combined by a weighted sum.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DatasetBundle;
use crate::retrieval::{cosine, Embedder};

#[derive(Debug, Error, PartialEq)]
pub enum DifficultyError {
    #[error("gini needs non-negative counts with a positive sum")]
    DegenerateCounts,
    #[error("normalization needs at least two datasets, got {0}")]
    TooFewDatasets(usize),
    #[error("weights must be non-negative and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("dataset {0} has no test documents")]
    NoTestSplit(String),
}

/// Mean absolute difference Gini, `ΣΣ|xi - xj| / (2 n Σx)`, computed in
/// O(n log n) from the sorted values.
pub fn gini(counts: &[f64]) -> Result<f64, DifficultyError> {
    let total: f64 = counts.iter().sum();
    if counts.is_empty() || counts.iter().any(|c| *c < 0.0 || !c.is_finite()) || total <= 0.0 {
        return Err(DifficultyError::DegenerateCounts);
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // Σ_{i<j} (x_j - x_i) = Σ_i x_(i) (2i - n + 1) over ascending ranks
    let half: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| x * (2.0 * i as f64 - n + 1.0))
        .sum();
    Ok((half / (n * total)).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    Whitespace,
    Characters,
}

impl Tokenization {
    /// Whitespace tokens unless most documents contain no whitespace at all.
    pub fn detect<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let (mut spaced, mut total) = (0usize, 0usize);
        for t in texts {
            total += 1;
            if t.split_whitespace().nth(1).is_some() {
                spaced += 1;
            }
        }
        if total > 0 && spaced * 2 < total {
            Tokenization::Characters
        } else {
            Tokenization::Whitespace
        }
    }

    pub fn count(self, text: &str) -> usize {
        match self {
            Tokenization::Whitespace => text.split_whitespace().count(),
            Tokenization::Characters => text.chars().filter(|c| !c.is_whitespace()).count(),
        }
    }
}

pub const DIMENSIONS: [&str; 6] = ["L_doc", "N_type", "S_type", "L_ent", "C_type", "N_ent"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dimensions {
    pub l_doc: f64,
    pub n_type: f64,
    pub s_type: f64,
    pub l_ent: f64,
    pub c_type: f64,
    pub n_ent: f64,
}

impl Dimensions {
    pub fn from_array(a: [f64; 6]) -> Self {
        Dimensions {
            l_doc: a[0],
            n_type: a[1],
            s_type: a[2],
            l_ent: a[3],
            c_type: a[4],
            n_ent: a[5],
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.l_doc, self.n_type, self.s_type, self.l_ent, self.c_type, self.n_ent]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum CTypeStatus {
    Computed,
    /// Fewer than two observed types: no pairs, recorded as 0.
    SingleType,
    /// The embedding service failed; recorded as 0 and excluded from the range.
    Unavailable(String),
}

pub const EQUAL_WEIGHTS: [f64; 6] = [1.0 / 6.0; 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyProfile {
    pub dataset: String,
    pub raw: Dimensions,
    pub c_type_status: CTypeStatus,
    pub tokenization: Tokenization,
    pub normalized: Option<Dimensions>,
    pub omega: Option<f64>,
    pub weights: [f64; 6],
}

impl DifficultyProfile {
    pub fn from_raw(dataset: impl Into<String>, raw: Dimensions) -> Self {
        DifficultyProfile {
            dataset: dataset.into(),
            raw,
            c_type_status: CTypeStatus::Computed,
            tokenization: Tokenization::Whitespace,
            normalized: None,
            omega: None,
            weights: EQUAL_WEIGHTS,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn type_confusability<E: Embedder + ?Sized>(
    bundle: &DatasetBundle,
    embedder: &E,
) -> Result<f64, String> {
    let mut surfaces: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for m in bundle.all_docs().flat_map(|d| d.gold.iter()) {
        surfaces.entry(&m.entity_type).or_default().insert(&m.span);
    }
    let mut centroids = Vec::with_capacity(surfaces.len());
    for spans in surfaces.values() {
        let texts: Vec<&str> = spans.iter().copied().collect();
        let mut sum: Vec<f64> = Vec::new();
        for chunk in texts.chunks(64) {
            for v in embedder.embed(chunk).map_err(|e| e.to_string())? {
                if sum.is_empty() {
                    sum = vec![0.0; v.len()];
                }
                if v.len() != sum.len() {
                    return Err(format!("embedding dimension changed from {} to {}", sum.len(), v.len()));
                }
                for (s, x) in sum.iter_mut().zip(&v) {
                    *s += f64::from(*x);
                }
            }
        }
        let n = texts.len() as f64;
        centroids.push(sum.into_iter().map(|s| (s / n) as f32).collect::<Vec<f32>>());
    }
    let mut sims = Vec::new();
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            sims.push(cosine(&centroids[i], &centroids[j]));
        }
    }
    Ok(mean(sims.into_iter()))
}

/// Raw dimensions of one dataset. Document and mention statistics pool all
/// splits; novelty compares test surfaces against train, case-insensitively.
pub fn compute_raw_dimensions<E: Embedder + ?Sized>(
    bundle: &DatasetBundle,
    embedder: &E,
) -> Result<DifficultyProfile, DifficultyError> {
    if bundle.test.is_empty() {
        return Err(DifficultyError::NoTestSplit(bundle.name.clone()));
    }
    let tok = Tokenization::detect(bundle.all_docs().map(|d| d.text.as_str()));
    let l_doc = mean(bundle.all_docs().map(|d| tok.count(&d.text) as f64));

    let mut per_type: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ent_lengths = Vec::new();
    for m in bundle.all_docs().flat_map(|d| d.gold.iter()) {
        *per_type.entry(&m.entity_type).or_default() += 1;
        ent_lengths.push(tok.count(&m.span) as f64);
    }
    let n_type = per_type.len() as f64;
    let counts: Vec<f64> = per_type.values().map(|c| *c as f64).collect();
    let s_type = gini(&counts).unwrap_or(0.0);
    let l_ent = mean(ent_lengths.into_iter());

    let (c_type, c_type_status) = if per_type.len() < 2 {
        (0.0, CTypeStatus::SingleType)
    } else {
        match type_confusability(bundle, embedder) {
            Ok(c) => (c, CTypeStatus::Computed),
            Err(e) => {
                log::warn!("C_type unavailable for {}: {e}", bundle.name);
                (0.0, CTypeStatus::Unavailable(e))
            }
        }
    };

    let surfaces = |docs: &[crate::corpus::AnnotatedDoc]| -> BTreeSet<String> {
        docs.iter()
            .flat_map(|d| d.gold.iter())
            .map(|m| m.span.to_lowercase())
            .collect()
    };
    let train = surfaces(&bundle.train);
    let test = surfaces(&bundle.test);
    let n_ent = if test.is_empty() {
        0.0
    } else {
        test.difference(&train).count() as f64 / test.len() as f64
    };

    Ok(DifficultyProfile {
        dataset: bundle.name.clone(),
        raw: Dimensions {
            l_doc,
            n_type,
            s_type,
            l_ent,
            c_type,
            n_ent,
        },
        c_type_status,
        tokenization: tok,
        normalized: None,
        omega: None,
        weights: EQUAL_WEIGHTS,
    })
}

/// Min-max scales every dimension across the collection (a constant
/// dimension maps to 0) and sets Ω as the weighted sum.
pub fn normalize_and_aggregate(
    profiles: &[DifficultyProfile],
    weights: [f64; 6],
) -> Result<Vec<DifficultyProfile>, DifficultyError> {
    if profiles.len() < 2 {
        return Err(DifficultyError::TooFewDatasets(profiles.len()));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DifficultyError::BadWeights(sum));
    }
    let usable = |p: &DifficultyProfile, dim: usize| dim != 4 || !matches!(p.c_type_status, CTypeStatus::Unavailable(_));
    let mut lo = [f64::INFINITY; 6];
    let mut hi = [f64::NEG_INFINITY; 6];
    for p in profiles {
        for (d, v) in p.raw.to_array().into_iter().enumerate() {
            if usable(p, d) {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
    }
    Ok(profiles
        .iter()
        .map(|p| {
            let raw = p.raw.to_array();
            let mut norm = [0.0; 6];
            for d in 0..6 {
                let range = hi[d] - lo[d];
                norm[d] = if usable(p, d) && range > 0.0 {
                    ((raw[d] - lo[d]) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
            let omega = norm.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>();
            DifficultyProfile {
                normalized: Some(Dimensions::from_array(norm)),
                omega: Some(omega),
                weights,
                ..p.clone()
            }
        })
        .collect())
}

/// Text table of normalized dimensions and Ω, sorted by Ω descending.
pub fn render_table(profiles: &[DifficultyProfile]) -> String {
    let mut rows: Vec<&DifficultyProfile> = profiles.iter().collect();
    rows.sort_by(|a, b| {
        b.omega
            .unwrap_or(0.0)
            .total_cmp(&a.omega.unwrap_or(0.0))
            .then_with(|| a.dataset.cmp(&b.dataset))
    });
    let width = rows.iter().map(|p| p.dataset.len()).max().unwrap_or(7).max(7);
    let mut s = format!("{:<width$}", "Dataset");
    for d in DIMENSIONS {
        s.push_str(&format!(" {d:>6}"));
    }
    s.push_str(&format!(" {:>6}\n", "Omega"));
    for p in rows {
        s.push_str(&format!("{:<width$}", p.dataset));
        let vals = p.normalized.map(|n| n.to_array()).unwrap_or(p.raw.to_array());
        for v in vals {
            s.push_str(&format!(" {v:>6.2}"));
        }
        match p.omega {
            Some(o) => s.push_str(&format!(" {o:>6.2}\n")),
            None => s.push_str(&format!(" {:>6}\n", "-")),
        }
    }
    s
}
