//! Span-level exact-match scoring, the demo type-overlap split, and the
//! Pearson correlation used to relate performance gains to difficulty.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{typeset, AnnotatedDoc, EntityMention, EntitySet, LabelSchema};
use crate::retrieval::DemoSet;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction for unknown doc id {0:?}")]
    UnknownDocId(String),
    #[error("no prediction entry for doc {0:?}")]
    MissingPrediction(String),
    #[error("no demonstration set recorded for doc {0:?}")]
    MissingDemos(String),
    #[error("doc {doc_id:?}: predicted type {entity_type:?} is not in the schema")]
    UnknownType { doc_id: String, entity_type: String },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("dataset {dataset:?} has no {what}")]
    MissingResult { dataset: String, what: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// True positives, false positives and false negatives for one type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

impl TypeCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    fn add(&mut self, other: &TypeCounts) {
        self.true_positive += other.true_positive;
        self.false_positive += other.false_positive;
        self.false_negative += other.false_negative;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub per_type: BTreeMap<String, TypeCounts>,
}

impl MatchCounts {
    pub fn totals(&self) -> TypeCounts {
        let mut total = TypeCounts::default();
        for c in self.per_type.values() {
            total.add(c);
        }
        total
    }

    pub fn merge(&mut self, other: &MatchCounts) {
        for (ty, c) in &other.per_type {
            self.per_type.entry(ty.clone()).or_default().add(c);
        }
    }

    fn entry(&mut self, ty: &str) -> &mut TypeCounts {
        self.per_type.entry(ty.to_string()).or_default()
    }
}

/// Which types the macro average runs over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroAveraging {
    /// Types that occur in the evaluated gold.
    #[default]
    GoldObserved,
    /// Every schema type.
    FullSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    /// F1 of every type the macro average runs over.
    pub per_type_f1: BTreeMap<String, f64>,
    pub counts: MatchCounts,
    pub n_docs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

impl EvalReport {
    pub fn with_subset(mut self, label: impl Into<String>) -> Self {
        self.subset = Some(label.into());
        self
    }

    /// Aligned plain-text table, one row per type plus micro/macro summary.
    pub fn to_table(&self) -> String {
        let width = self
            .counts
            .per_type
            .keys()
            .map(String::len)
            .chain(["MACRO".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        if let Some(s) = &self.subset {
            out.push_str(&format!("subset: {s}\n"));
        }
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8}\n",
            "type", "tp", "fp", "fn", "f1"
        ));
        for (ty, c) in &self.counts.per_type {
            out.push_str(&format!(
                "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7.2}%\n",
                ty,
                c.true_positive,
                c.false_positive,
                c.false_negative,
                100.0 * c.f1()
            ));
        }
        let t = self.counts.totals();
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7.2}%\n",
            "MICRO",
            t.true_positive,
            t.false_positive,
            t.false_negative,
            100.0 * self.micro_f1
        ));
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7.2}%\n",
            "MACRO",
            "",
            "",
            "",
            100.0 * self.macro_f1
        ));
        out.push_str(&format!("docs: {}\n", self.n_docs));
        out
    }
}

/// NFC-normalized span with surrounding whitespace removed.
pub fn normalize_span(span: &str) -> String {
    span.trim().nfc().collect()
}

fn normalize_set(set: &EntitySet) -> BTreeSet<EntityMention> {
    set.iter()
        .map(|m| EntityMention::new(normalize_span(&m.span), m.entity_type.clone()))
        .collect()
}

/// Pooled exact-match counts over `gold`. Predictions are keyed by doc id.
pub fn count_matches(
    predictions: &BTreeMap<String, EntitySet>,
    gold: &[AnnotatedDoc],
    schema: &LabelSchema,
) -> Result<MatchCounts> {
    let gold_ids: BTreeSet<&str> = gold.iter().map(|d| d.id.as_str()).collect();
    if let Some(unknown) = predictions.keys().find(|k| !gold_ids.contains(k.as_str())) {
        return Err(MetricsError::UnknownDocId(unknown.clone()));
    }
    let mut counts = MatchCounts::default();
    for doc in gold {
        let predicted = predictions
            .get(&doc.id)
            .ok_or_else(|| MetricsError::MissingPrediction(doc.id.clone()))?;
        if let Some(bad) = predicted.iter().find(|m| !schema.contains(&m.entity_type)) {
            return Err(MetricsError::UnknownType {
                doc_id: doc.id.clone(),
                entity_type: bad.entity_type.clone(),
            });
        }
        let predicted = normalize_set(predicted);
        let expected = normalize_set(&doc.gold);
        for m in predicted.intersection(&expected) {
            counts.entry(&m.entity_type).true_positive += 1;
        }
        for m in predicted.difference(&expected) {
            counts.entry(&m.entity_type).false_positive += 1;
        }
        for m in expected.difference(&predicted) {
            counts.entry(&m.entity_type).false_negative += 1;
        }
    }
    Ok(counts)
}

/// Micro and macro F1 of `predictions` against `gold`.
pub fn score(
    predictions: &BTreeMap<String, EntitySet>,
    gold: &[AnnotatedDoc],
    schema: &LabelSchema,
    averaging: MacroAveraging,
) -> Result<EvalReport> {
    let counts = count_matches(predictions, gold, schema)?;
    Ok(report_from_counts(counts, gold, schema, averaging))
}

pub fn report_from_counts(
    counts: MatchCounts,
    gold: &[AnnotatedDoc],
    schema: &LabelSchema,
    averaging: MacroAveraging,
) -> EvalReport {
    let macro_types: BTreeSet<String> = match averaging {
        MacroAveraging::GoldObserved => gold.iter().flat_map(|d| typeset(&d.gold)).collect(),
        MacroAveraging::FullSchema => schema.type_names().map(str::to_string).collect(),
    };
    let per_type_f1: BTreeMap<String, f64> = macro_types
        .iter()
        .map(|ty| {
            let f = counts.per_type.get(ty).map(TypeCounts::f1).unwrap_or(0.0);
            (ty.clone(), f)
        })
        .collect();
    let macro_f1 = if per_type_f1.is_empty() {
        0.0
    } else {
        per_type_f1.values().sum::<f64>() / per_type_f1.len() as f64
    };
    let totals = counts.totals();
    EvalReport {
        micro_f1: totals.f1(),
        macro_f1,
        micro_precision: totals.precision(),
        micro_recall: totals.recall(),
        per_type_f1,
        counts,
        n_docs: gold.len(),
        subset: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSplitReport {
    pub report_overlap: EvalReport,
    pub report_no_overlap: EvalReport,
    pub n_overlap: usize,
    pub n_no_overlap: usize,
}

/// True when any demo shares an entity type with the doc's gold.
pub fn has_type_overlap(doc: &AnnotatedDoc, demos: &DemoSet) -> bool {
    let query_types = typeset(&doc.gold);
    demos
        .demos
        .iter()
        .any(|d| typeset(&d.doc.gold).iter().any(|t| query_types.contains(t)))
}

/// Scores docs whose demos shared a gold type separately from those whose
/// demos did not.
pub fn overlap_split_score(
    predictions: &BTreeMap<String, EntitySet>,
    gold: &[AnnotatedDoc],
    demos_used: &BTreeMap<String, DemoSet>,
    schema: &LabelSchema,
    averaging: MacroAveraging,
) -> Result<OverlapSplitReport> {
    let gold_ids: BTreeSet<&str> = gold.iter().map(|d| d.id.as_str()).collect();
    if let Some(unknown) = predictions.keys().find(|k| !gold_ids.contains(k.as_str())) {
        return Err(MetricsError::UnknownDocId(unknown.clone()));
    }
    let mut overlap = Vec::new();
    let mut no_overlap = Vec::new();
    for doc in gold {
        let demos = demos_used
            .get(&doc.id)
            .ok_or_else(|| MetricsError::MissingDemos(doc.id.clone()))?;
        if has_type_overlap(doc, demos) {
            overlap.push(doc.clone());
        } else {
            no_overlap.push(doc.clone());
        }
    }
    let subset_preds = |docs: &[AnnotatedDoc]| -> BTreeMap<String, EntitySet> {
        docs.iter()
            .filter_map(|d| predictions.get(&d.id).map(|p| (d.id.clone(), p.clone())))
            .collect()
    };
    let report_overlap = score(&subset_preds(&overlap), &overlap, schema, averaging)?
        .with_subset("overlap");
    let report_no_overlap = score(&subset_preds(&no_overlap), &no_overlap, schema, averaging)?
        .with_subset("no_overlap");
    Ok(OverlapSplitReport {
        report_overlap,
        report_no_overlap,
        n_overlap: overlap.len(),
        n_no_overlap: no_overlap.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value from Student's t with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(MetricsError::DegenerateInput(format!(
            "length mismatch {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 3 {
        return Err(MetricsError::DegenerateInput(format!("n = {n} < 3")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateInput("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    let p = if (1.0 - r.abs()) < 1e-15 {
        0.0
    } else {
        let t = r * (dof / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).expect("dof > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation { r, p, n })
}

/// Macro and micro F1 of one method on one dataset, in any consistent unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Pair {
    #[serde(rename = "macro")]
    pub macro_f1: f64,
    #[serde(rename = "micro")]
    pub micro_f1: f64,
}

/// Which fine-tuned baseline each dataset's gain is measured against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMap {
    pub default: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
}

impl BaselineMap {
    pub fn baseline_for(&self, dataset: &str) -> &str {
        self.overrides
            .get(dataset)
            .map(String::as_str)
            .unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub dataset: String,
    pub omega: f64,
    pub baseline: String,
    pub delta_macro: f64,
    pub delta_micro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCorrelation {
    pub method: String,
    pub rows: Vec<GainRow>,
    pub macro_corr: Correlation,
    pub micro_corr: Correlation,
}

impl GainCorrelation {
    /// `dataset,omega,baseline,delta_macro,delta_micro` rows for plotting.
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("dataset,omega,baseline,delta_macro,delta_micro\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.dataset, r.omega, r.baseline, r.delta_macro, r.delta_micro
            ));
        }
        out
    }
}

/// Per-dataset gain `F1(method) - F1(baseline)` correlated against Ω.
///
/// `results[dataset][method]` holds published or measured F1 pairs; datasets
/// are taken in `omega` order.
pub fn gain_correlation(
    results: &BTreeMap<String, BTreeMap<String, F1Pair>>,
    omega: &[(String, f64)],
    method: &str,
    baselines: &BaselineMap,
) -> Result<GainCorrelation> {
    let mut rows = Vec::with_capacity(omega.len());
    for (dataset, om) in omega {
        let per_method = results
            .get(dataset)
            .ok_or_else(|| MetricsError::MissingResult {
                dataset: dataset.clone(),
                what: "results".into(),
            })?;
        let lookup = |name: &str| {
            per_method
                .get(name)
                .copied()
                .ok_or_else(|| MetricsError::MissingResult {
                    dataset: dataset.clone(),
                    what: format!("result for {name:?}"),
                })
        };
        let ours = lookup(method)?;
        let baseline = baselines.baseline_for(dataset);
        let base = lookup(baseline)?;
        rows.push(GainRow {
            dataset: dataset.clone(),
            omega: *om,
            baseline: baseline.to_string(),
            delta_macro: ours.macro_f1 - base.macro_f1,
            delta_micro: ours.micro_f1 - base.micro_f1,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.omega).collect();
    let macro_ys: Vec<f64> = rows.iter().map(|r| r.delta_macro).collect();
    let micro_ys: Vec<f64> = rows.iter().map(|r| r.delta_micro).collect();
    Ok(GainCorrelation {
        method: method.to_string(),
        macro_corr: pearson_r(&xs, &macro_ys)?,
        micro_corr: pearson_r(&xs, &micro_ys)?,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityMention as M;

    fn schema() -> LabelSchema {
        LabelSchema::from_names("s", &["T1", "T2"]).unwrap()
    }

    fn set(items: &[(&str, &str)]) -> EntitySet {
        items.iter().map(|(s, t)| M::new(*s, *t)).collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gold = vec![AnnotatedDoc::new("d", "a b", set(&[("a", "T1"), ("b", "T2")]))];
        let preds = BTreeMap::from([("d".to_string(), gold[0].gold.clone())]);
        let r = score(&preds, &gold, &schema(), MacroAveraging::GoldObserved).unwrap();
        assert_eq!(r.micro_f1, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn hand_counted_partial_prediction() {
        // TP=1, FP=0, FN=1: P=1, R=1/2, F1=2/3; T1 f1=1, T2 f1=0
        let gold = vec![AnnotatedDoc::new("d", "a b", set(&[("a", "T1"), ("b", "T2")]))];
        let preds = BTreeMap::from([("d".to_string(), set(&[("a", "T1")]))]);
        let r = score(&preds, &gold, &schema(), MacroAveraging::GoldObserved).unwrap();
        assert_eq!(r.micro_precision, 1.0);
        assert_eq!(r.micro_recall, 0.5);
        assert!((r.micro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_type_f1["T1"], 1.0);
        assert_eq!(r.per_type_f1["T2"], 0.0);
        assert_eq!(r.macro_f1, 0.5);
    }

    #[test]
    fn macro_averaging_modes() {
        let schema = LabelSchema::from_names("s", &["T1", "T2", "T3"]).unwrap();
        let gold = vec![AnnotatedDoc::new("d", "a", set(&[("a", "T1")]))];
        let preds = BTreeMap::from([("d".to_string(), set(&[("a", "T1")]))]);
        let observed = score(&preds, &gold, &schema, MacroAveraging::GoldObserved).unwrap();
        assert_eq!(observed.macro_f1, 1.0);
        let full = score(&preds, &gold, &schema, MacroAveraging::FullSchema).unwrap();
        assert!((full.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn predicted_spans_are_trimmed_and_nfc_normalized() {
        let gold = vec![AnnotatedDoc::new("d", "caf\u{e9}", set(&[("caf\u{e9}", "T1")]))];
        let preds = BTreeMap::from([("d".to_string(), set(&[("  cafe\u{301} ", "T1")]))]);
        let r = score(&preds, &gold, &schema(), MacroAveraging::GoldObserved).unwrap();
        assert_eq!(r.micro_f1, 1.0);
    }

    #[test]
    fn matching_is_case_sensitive() {
        let gold = vec![AnnotatedDoc::new("d", "Emotet", set(&[("Emotet", "T1")]))];
        let preds = BTreeMap::from([("d".to_string(), set(&[("emotet", "T1")]))]);
        let r = score(&preds, &gold, &schema(), MacroAveraging::GoldObserved).unwrap();
        assert_eq!(r.micro_f1, 0.0);
    }

    #[test]
    fn error_paths() {
        let gold = vec![AnnotatedDoc::new("d", "a", set(&[("a", "T1")]))];
        let unknown = BTreeMap::from([
            ("d".to_string(), EntitySet::new()),
            ("zz".to_string(), EntitySet::new()),
        ]);
        assert_eq!(
            score(&unknown, &gold, &schema(), MacroAveraging::GoldObserved),
            Err(MetricsError::UnknownDocId("zz".into()))
        );
        let bad_type = BTreeMap::from([("d".to_string(), set(&[("a", "Nope")]))]);
        assert!(matches!(
            score(&bad_type, &gold, &schema(), MacroAveraging::GoldObserved),
            Err(MetricsError::UnknownType { .. })
        ));
        assert_eq!(
            score(&BTreeMap::new(), &gold, &schema(), MacroAveraging::GoldObserved),
            Err(MetricsError::MissingPrediction("d".into()))
        );
    }

    #[test]
    fn pearson_perfect_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let c = pearson_r(&xs, &ys).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
        assert_eq!(c.p, 0.0);
    }

    #[test]
    fn pearson_degenerate_inputs() {
        assert!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pearson_p_value_matches_reference() {
        // scipy.stats.pearsonr([1,2,3,4,5],[2,1,4,3,5]) -> r=0.8, p=0.10408803866182799
        let c = pearson_r(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((c.r - 0.8).abs() < 1e-12);
        assert!((c.p - 0.104_088_038_661_827_99).abs() < 1e-9);
    }
}
