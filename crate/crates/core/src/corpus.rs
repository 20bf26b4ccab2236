//! Annotated NER datasets: label schemas, documents with gold entity sets,
//! JSONL/CoNLL loading, and seeded iterative stratified subsampling.
//!
//! Entities are `(span, type)` pairs over verbatim span text, not character
//! offsets. An [`EntitySet`] is a true set: duplicate pairs collapse.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("doc {doc_id:?}: entity type {entity_type:?} is not in the schema")]
    SchemaViolation { doc_id: String, entity_type: String },
    #[error("doc {doc_id:?}: span {span:?} does not occur in the text")]
    SpanNotFound { doc_id: String, span: String },
    #[error("doc {doc_id:?}: empty span")]
    EmptySpan { doc_id: String },
    #[error("duplicate doc id {0:?}")]
    DuplicateId(String),
    #[error("doc id {0:?} appears in more than one split")]
    OverlappingSplits(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid sampling request: {0}")]
    InvalidSample(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeDef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

/// The ordered set of entity types a dataset is annotated with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub name: String,
    pub types: Vec<TypeDef>,
}

impl LabelSchema {
    pub fn new(name: impl Into<String>, types: Vec<TypeDef>) -> Result<Self> {
        let schema = LabelSchema {
            name: name.into(),
            types,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Schema from bare type names, without descriptions.
    pub fn from_names<S: AsRef<str>>(name: impl Into<String>, names: &[S]) -> Result<Self> {
        Self::new(
            name,
            names
                .iter()
                .map(|n| TypeDef {
                    name: n.as_ref().to_string(),
                    description: None,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(CorpusError::InvalidSchema("no entity types".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.types {
            if t.name.trim().is_empty() {
                return Err(CorpusError::InvalidSchema("empty type name".into()));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(CorpusError::InvalidSchema(format!(
                    "duplicate type name {:?}",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let schema: LabelSchema =
            serde_json::from_str(&raw).map_err(|e| CorpusError::Parse {
                path: path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn contains(&self, type_name: &str) -> bool {
        self.types.iter().any(|t| t.name == type_name)
    }

    pub fn type_names(&self) -> impl Iterator<Item = &str> {
        self.types.iter().map(|t| t.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn description(&self, type_name: &str) -> Option<&str> {
        self.types
            .iter()
            .find(|t| t.name == type_name)
            .and_then(|t| t.description.as_deref())
    }
}

/// One `(span, type)` mention.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityMention {
    pub span: String,
    #[serde(rename = "type")]
    pub entity_type: String,
}

impl EntityMention {
    pub fn new(span: impl Into<String>, entity_type: impl Into<String>) -> Self {
        EntityMention {
            span: span.into(),
            entity_type: entity_type.into(),
        }
    }
}

impl fmt::Display for EntityMention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?}, {})", self.span, self.entity_type)
    }
}

/// A set of mentions, ordered by `(span, type)` so serialization is canonical.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntitySet(BTreeSet<EntityMention>);

impl EntitySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, mention: EntityMention) -> bool {
        self.0.insert(mention)
    }

    pub fn contains(&self, mention: &EntityMention) -> bool {
        self.0.contains(mention)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EntityMention> {
        self.0.iter()
    }

    pub fn union(&self, other: &EntitySet) -> EntitySet {
        EntitySet(self.0.union(&other.0).cloned().collect())
    }

    pub fn difference<'a>(&'a self, other: &'a EntitySet) -> impl Iterator<Item = &'a EntityMention> {
        self.0.difference(&other.0)
    }

    /// Compact JSON array in the `[{"span":..,"type":..}]` answer format.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("entity sets always serialize")
    }
}

impl FromIterator<EntityMention> for EntitySet {
    fn from_iter<I: IntoIterator<Item = EntityMention>>(iter: I) -> Self {
        EntitySet(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a EntitySet {
    type Item = &'a EntityMention;
    type IntoIter = std::collections::btree_set::Iter<'a, EntityMention>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Distinct entity types of a set.
pub fn typeset(entities: &EntitySet) -> BTreeSet<String> {
    entities.iter().map(|m| m.entity_type.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDoc {
    pub id: String,
    pub text: String,
    #[serde(rename = "entities")]
    pub gold: EntitySet,
}

impl AnnotatedDoc {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold: EntitySet) -> Self {
        AnnotatedDoc {
            id: id.into(),
            text: text.into(),
            gold,
        }
    }

    /// Checks that every gold span is non-empty, occurs verbatim in the text
    /// and (when a schema is given) carries a known type.
    pub fn validate(&self, schema: Option<&LabelSchema>) -> Result<()> {
        for m in &self.gold {
            if m.span.is_empty() {
                return Err(CorpusError::EmptySpan {
                    doc_id: self.id.clone(),
                });
            }
            if !self.text.contains(&m.span) {
                return Err(CorpusError::SpanNotFound {
                    doc_id: self.id.clone(),
                    span: m.span.clone(),
                });
            }
            if let Some(schema) = schema {
                if !schema.contains(&m.entity_type) {
                    return Err(CorpusError::SchemaViolation {
                        doc_id: self.id.clone(),
                        entity_type: m.entity_type.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Dev => "dev.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    /// Whitespace-separated `token TAG` lines with BIO tags, blank line between docs.
    Conll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub schema: LabelSchema,
    pub train: Vec<AnnotatedDoc>,
    pub dev: Option<Vec<AnnotatedDoc>>,
    pub test: Vec<AnnotatedDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    name: String,
    train: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dev: Option<usize>,
    test: usize,
}

impl DatasetBundle {
    pub fn new(
        name: impl Into<String>,
        schema: LabelSchema,
        train: Vec<AnnotatedDoc>,
        dev: Option<Vec<AnnotatedDoc>>,
        test: Vec<AnnotatedDoc>,
    ) -> Result<Self> {
        let bundle = DatasetBundle {
            name: name.into(),
            schema,
            train,
            dev,
            test,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let mut all_ids = HashSet::new();
        for split in self.splits() {
            let mut split_ids = HashSet::new();
            for doc in split {
                doc.validate(Some(&self.schema))?;
                if !split_ids.insert(doc.id.as_str()) {
                    return Err(CorpusError::DuplicateId(doc.id.clone()));
                }
                if !all_ids.insert(doc.id.as_str()) {
                    return Err(CorpusError::OverlappingSplits(doc.id.clone()));
                }
            }
        }
        Ok(())
    }

    fn splits(&self) -> impl Iterator<Item = &Vec<AnnotatedDoc>> {
        std::iter::once(&self.train)
            .chain(self.dev.iter())
            .chain(std::iter::once(&self.test))
    }

    pub fn all_docs(&self) -> impl Iterator<Item = &AnnotatedDoc> {
        self.splits().flatten()
    }

    pub fn split(&self, split: Split) -> Option<&[AnnotatedDoc]> {
        match split {
            Split::Train => Some(&self.train),
            Split::Dev => self.dev.as_deref(),
            Split::Test => Some(&self.test),
        }
    }

    /// Validation docs: dev when present, otherwise the training split.
    pub fn validation_docs(&self) -> &[AnnotatedDoc] {
        self.dev.as_deref().unwrap_or(&self.train)
    }

    pub fn split_sizes(&self) -> (usize, Option<usize>, usize) {
        (
            self.train.len(),
            self.dev.as_ref().map(Vec::len),
            self.test.len(),
        )
    }

    /// Writes `bundle.json`, `schema.json` and one JSONL file per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        let (train, dev, test) = self.split_sizes();
        let manifest = BundleManifest {
            name: self.name.clone(),
            train,
            dev,
            test,
        };
        write_file(
            &dir.join("bundle.json"),
            &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
        )?;
        write_file(
            &dir.join("schema.json"),
            &(serde_json::to_string_pretty(&self.schema).expect("schema serializes") + "\n"),
        )?;
        write_file(&dir.join(Split::Train.file_name()), &to_jsonl(&self.train))?;
        if let Some(dev) = &self.dev {
            write_file(&dir.join(Split::Dev.file_name()), &to_jsonl(dev))?;
        }
        write_file(&dir.join(Split::Test.file_name()), &to_jsonl(&self.test))?;
        Ok(())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CorpusError::io(path, e))
}

/// Loads a bundle directory holding `schema.json`, `train.*`, optional `dev.*`
/// and `test.*` files in the given format (`.jsonl` or `.conll`).
pub fn load_dataset(dir: &Path, format: DatasetFormat) -> Result<DatasetBundle> {
    let schema = LabelSchema::load(&dir.join("schema.json"))?;
    load_dataset_with_schema(dir, format, schema)
}

/// Like [`load_dataset`] with the schema supplied by the caller.
pub fn load_dataset_with_schema(dir: &Path, format: DatasetFormat, schema: LabelSchema) -> Result<DatasetBundle> {
    let ext = match format {
        DatasetFormat::Jsonl => "jsonl",
        DatasetFormat::Conll => "conll",
    };
    let read = |stem: &str| -> Result<Option<Vec<AnnotatedDoc>>> {
        let path = dir.join(format!("{stem}.{ext}"));
        if !path.exists() {
            return Ok(None);
        }
        match format {
            DatasetFormat::Jsonl => read_jsonl(&path).map(Some),
            DatasetFormat::Conll => {
                let raw = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
                from_conll(&raw, stem, " ").map(Some)
            }
        }
    };
    let name = fs::read_to_string(dir.join("bundle.json"))
        .ok()
        .and_then(|raw| serde_json::from_str::<BundleManifest>(&raw).ok())
        .map(|m| m.name)
        .unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        });
    let missing = |split: &str| CorpusError::Io {
        path: dir.join(format!("{split}.{ext}")).display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "split file missing"),
    };
    let train = read("train")?.ok_or_else(|| missing("train"))?;
    let dev = read("dev")?;
    let test = read("test")?.ok_or_else(|| missing("test"))?;
    DatasetBundle::new(name, schema, train, dev, test)
}

/// Parses one JSONL split. Spans are checked against the text; types are
/// checked later against the bundle schema.
pub fn read_jsonl(path: &Path) -> Result<Vec<AnnotatedDoc>> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    parse_jsonl(BufReader::new(file), &path.display().to_string())
}

pub fn parse_jsonl<R: BufRead>(reader: R, origin: &str) -> Result<Vec<AnnotatedDoc>> {
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io {
            path: origin.to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: AnnotatedDoc = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        doc.validate(None)?;
        if !ids.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Canonical JSONL: one compact record per line, keys in `id, text, entities`
/// order, entities sorted by `(span, type)`.
pub fn to_jsonl(docs: &[AnnotatedDoc]) -> String {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc).expect("docs always serialize"));
        out.push('\n');
    }
    out
}

/// Converts BIO-tagged CoNLL text into span-text documents. Tokens are
/// rejoined with `joiner` to form both the text and the spans.
pub fn from_conll(raw: &str, id_prefix: &str, joiner: &str) -> Result<Vec<AnnotatedDoc>> {
    let mut docs = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let id = format!("{id_prefix}-{}", docs.len());
        let text = tokens.join(joiner);
        let mut gold = EntitySet::new();
        let mut current: Option<(Vec<&str>, String)> = None;
        for (tok, tag) in tokens.iter().zip(tags.iter()) {
            let (prefix, ty) = match tag.split_once('-') {
                Some((p, t)) => (p, Some(t)),
                None => (tag.as_str(), None),
            };
            match (prefix, ty) {
                ("B", Some(t)) | ("S", Some(t)) => {
                    if let Some((words, ty)) = current.take() {
                        gold.insert(EntityMention::new(words.join(joiner), ty));
                    }
                    current = Some((vec![tok.as_str()], t.to_string()));
                }
                ("I", Some(t)) | ("E", Some(t)) | ("M", Some(t)) => match current.as_mut() {
                    Some((words, ty)) if ty == t => words.push(tok),
                    _ => {
                        if let Some((words, ty)) = current.take() {
                            gold.insert(EntityMention::new(words.join(joiner), ty));
                        }
                        current = Some((vec![tok.as_str()], t.to_string()));
                    }
                },
                _ => {
                    if let Some((words, ty)) = current.take() {
                        gold.insert(EntityMention::new(words.join(joiner), ty));
                    }
                }
            }
        }
        if let Some((words, ty)) = current.take() {
            gold.insert(EntityMention::new(words.join(joiner), ty));
        }
        docs.push(AnnotatedDoc::new(id, text, gold));
        tokens.clear();
        tags.clear();
        Ok(())
    };

    for (idx, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut tags)?;
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(tok), Some(tag)) = (parts.next(), parts.next_back()) else {
            return Err(CorpusError::Parse {
                path: id_prefix.to_string(),
                line: idx + 1,
                message: "expected `token TAG`".into(),
            });
        };
        tokens.push(tok.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags)?;
    Ok(docs)
}

/// Drops docs whose text exactly repeats an earlier doc; returns removed ids.
pub fn dedup_by_text(docs: Vec<AnnotatedDoc>) -> (Vec<AnnotatedDoc>, Vec<String>) {
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(docs.len());
    let mut removed = Vec::new();
    for doc in docs {
        if seen.insert(doc.text.clone()) {
            kept.push(doc);
        } else {
            removed.push(doc.id);
        }
    }
    (kept, removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    Ceil,
    Floor,
}

/// Number of docs a fraction selects from `n`: at least one, never more than `n`.
pub fn sample_size(n: usize, fraction: f64, rounding: Rounding) -> usize {
    let exact = fraction * n as f64;
    // absorb representation error such as 0.07 * 100 = 7.000000000000001
    let rounded = match rounding {
        Rounding::Ceil => (exact - 1e-9).ceil(),
        Rounding::Floor => (exact + 1e-9).floor(),
    };
    (rounded.max(1.0) as usize).min(n)
}

/// Selects a fraction of `docs` by iterative stratification over the entity
/// types each doc contains.
///
/// Each type gets a quota of `round(fraction * docs_with_type)`. At every
/// step the type with the fewest remaining candidate docs that still has
/// unmet demand is served first; among its docs, the one that overshoots
/// the fewest already-satisfied quotas wins, with seeded shuffle order
/// breaking remaining ties. Once every quota is met the sample is topped up
/// with the least-overshooting docs. The result keeps input order.
pub fn stratified_subsample(
    docs: &[AnnotatedDoc],
    fraction: f64,
    seed: u64,
    rounding: Rounding,
) -> Result<Vec<AnnotatedDoc>> {
    if docs.is_empty() {
        return Err(CorpusError::InvalidSample("no docs to sample from".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::InvalidSample(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let target = sample_size(docs.len(), fraction, rounding);

    let mut label_index: BTreeMap<String, usize> = BTreeMap::new();
    for doc in docs {
        for ty in typeset(&doc.gold) {
            let next = label_index.len();
            label_index.entry(ty).or_insert(next);
        }
    }
    // label ids follow name order so ties between equally rare labels are stable
    for (i, v) in label_index.values_mut().enumerate() {
        *v = i;
    }
    let doc_labels: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| typeset(&d.gold).iter().map(|t| label_index[t]).collect())
        .collect();

    let n_labels = label_index.len();
    let mut available = vec![0i64; n_labels];
    for labels in &doc_labels {
        for &l in labels {
            available[l] += 1;
        }
    }
    let mut demand: Vec<i64> = available
        .iter()
        .map(|&c| (fraction * c as f64).round() as i64)
        .collect();

    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rank = vec![0usize; docs.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }

    let mut remaining = vec![true; docs.len()];
    let mut selected = Vec::with_capacity(target);

    while selected.len() < target {
        let focus = (0..n_labels)
            .filter(|&l| demand[l] > 0 && available[l] > 0)
            .min_by_key(|&l| (available[l], l));

        let cost = |i: usize| {
            let overshoot = doc_labels[i].iter().filter(|&&l| demand[l] <= 0).count();
            let covered = doc_labels[i].iter().filter(|&&l| demand[l] > 0).count();
            (overshoot, std::cmp::Reverse(covered), rank[i])
        };

        let pick = (0..docs.len())
            .filter(|&i| remaining[i])
            .filter(|&i| focus.is_none_or(|l| doc_labels[i].contains(&l)))
            .min_by_key(|&i| cost(i))
            .expect("target never exceeds the number of docs");

        remaining[pick] = false;
        for &l in &doc_labels[pick] {
            demand[l] -= 1;
            available[l] -= 1;
        }
        selected.push(pick);
    }

    selected.sort_unstable();
    Ok(selected.into_iter().map(|i| docs[i].clone()).collect())
}

/// Default on-disk location of a split inside a bundle directory.
pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(split.file_name())
}
