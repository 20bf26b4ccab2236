//! Feedback-driven instruction refinement.
//!
//! Each epoch walks the training subset one document at a time: run the
//! executor under the current guideline, compare with gold, and on any
//! mismatch ask the reflector for a semantic gradient and the editor to
//! apply it. The revised guideline is used for the very next document, so
//! the loop is strictly sequential.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{stratified_subsample, AnnotatedDoc, CorpusError, DatasetBundle, EntityMention, EntitySet, Rounding};
use crate::executor::{Executor, ExecutorError};
use crate::instruction::{
    render_instruction_set, save_guideline, write_json, AnnotationGuideline, InstructionError, InstructionSet,
    Subsection, Variant,
};
use crate::llm::{Agent, ChatMessage, GatewayError, ParsedExtraction};
use crate::metrics::{self, MacroAveraging, MetricsError};
use crate::prompts::{self, tags};
use crate::retrieval::{DemoSet, Paradigm};

#[derive(Debug, Error)]
pub enum FirError {
    #[error("invalid refinement config: {0}")]
    Config(String),
    #[error("reflector output for {doc_id} unusable: {reason}")]
    ReflectorParseFailure { doc_id: String, reason: String },
    #[error("editor revision still {chars} characters after compression (cap {cap})")]
    EditorOverCap { chars: usize, cap: usize },
    #[error("gradient locator ({entity_type}, {subsection}) does not resolve")]
    InvalidLocator { entity_type: String, subsection: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl FirError {
    /// Errors that end a run; everything else is logged and skipped.
    pub fn is_fatal(&self) -> bool {
        match self {
            FirError::Gateway(g) => g.is_fatal(),
            FirError::Executor(e) => e.is_fatal(),
            FirError::Instruction(i) => i.is_fatal(),
            FirError::Config(_) | FirError::Corpus(_) | FirError::Io { .. } => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorClass {
    FN,
    FP,
    BE,
    CE,
}

impl ErrorClass {
    pub fn describe(self) -> &'static str {
        match self {
            ErrorClass::FN => "false negative",
            ErrorClass::FP => "false positive",
            ErrorClass::BE => "boundary error",
            ErrorClass::CE => "classification error",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ErrorClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FN" | "FALSE NEGATIVE" => Ok(ErrorClass::FN),
            "FP" | "FALSE POSITIVE" => Ok(ErrorClass::FP),
            "BE" | "BOUNDARY ERROR" => Ok(ErrorClass::BE),
            "CE" | "CLASSIFICATION ERROR" => Ok(ErrorClass::CE),
            other => Err(format!("unknown error class {other:?}")),
        }
    }
}

/// One mismatch between prediction and gold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedError {
    pub class: ErrorClass,
    pub gold: Option<EntityMention>,
    pub predicted: Option<EntityMention>,
}

fn spans_overlap(a: &str, b: &str) -> bool {
    a.contains(b) || b.contains(a)
}

/// Pairs each missed gold mention with at most one spurious prediction:
/// same span and another type is a CE, same type and overlapping span a
/// BE. Unpaired gold mentions are FN, unpaired predictions FP.
pub fn classify_errors(predicted: &EntitySet, gold: &EntitySet) -> Vec<ClassifiedError> {
    let missed: Vec<&EntityMention> = gold.difference(predicted).collect();
    let spurious: Vec<&EntityMention> = predicted.difference(gold).collect();
    let mut used = vec![false; spurious.len()];
    let mut out = Vec::new();
    for g in &missed {
        let pick = |pred: &dyn Fn(&EntityMention) -> bool, used: &[bool]| {
            spurious.iter().enumerate().position(|(i, p)| !used[i] && pred(p))
        };
        let ce = pick(&|p| p.span == g.span, &used);
        let (class, idx) = match ce {
            Some(i) => (ErrorClass::CE, Some(i)),
            None => match pick(&|p| p.entity_type == g.entity_type && spans_overlap(&p.span, &g.span), &used) {
                Some(i) => (ErrorClass::BE, Some(i)),
                None => (ErrorClass::FN, None),
            },
        };
        if let Some(i) = idx {
            used[i] = true;
        }
        out.push(ClassifiedError {
            class,
            gold: Some((*g).clone()),
            predicted: idx.map(|i| spurious[i].clone()),
        });
    }
    for (i, p) in spurious.iter().enumerate() {
        if !used[i] {
            out.push(ClassifiedError {
                class: ErrorClass::FP,
                gold: None,
                predicted: Some((*p).clone()),
            });
        }
    }
    out
}

/// 1 iff the two sets differ under exact `(span, type)` equality.
pub fn error_signal(predicted: &EntitySet, gold: &EntitySet) -> u8 {
    u8::from(predicted != gold)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Locator {
    pub entity_type: String,
    pub subsection: Subsection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub rule: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticGradient {
    pub gradient_id: String,
    pub error_class: ErrorClass,
    pub what: String,
    pub why: String,
    #[serde(rename = "where")]
    pub locator: Locator,
    pub how: Proposal,
    pub source_doc_id: String,
}

impl SemanticGradient {
    pub fn summary(&self) -> String {
        format!(
            "What ({}): {}\nWhy: {}\nWhere: {} / {}\nHow: {}\nRationale: {}",
            self.error_class,
            self.what,
            self.why,
            self.locator.entity_type,
            self.locator.subsection.as_str(),
            self.how.rule,
            self.how.rationale
        )
    }
}

/// A reflector result: a usable gradient, or a recorded no-op.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Gradient {
    Step(SemanticGradient),
    NoOp {
        gradient_id: String,
        source_doc_id: String,
        reason: String,
    },
}

impl Gradient {
    pub fn id(&self) -> &str {
        match self {
            Gradient::Step(g) => &g.gradient_id,
            Gradient::NoOp { gradient_id, .. } => gradient_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub predicted: EntitySet,
    pub parsed: ParsedExtraction,
    pub guideline_version: Option<u32>,
}

/// Executor prediction under the full instruction set, without demos.
pub fn forward_pass(doc: &AnnotatedDoc, set: &InstructionSet, executor: &Executor) -> Result<ForwardResult, FirError> {
    let instruction = render_instruction_set(set, Variant::Full)?;
    let parsed = executor.extract(&instruction, &DemoSet::empty(Paradigm::SemanticKnn), doc)?;
    Ok(ForwardResult {
        predicted: parsed.entities.clone(),
        parsed,
        guideline_version: set.procedure.as_ref().map(|g| g.version),
    })
}

pub fn reflector_prompt(
    doc: &AnnotatedDoc,
    guideline: &AnnotationGuideline,
    predicted: &EntitySet,
    gold: &EntitySet,
) -> String {
    let mut s = format!(
        "Text:\n{}\n\nCurrent annotation guideline (version {}):\n{}\n{}{}\n{}{}\n",
        doc.text,
        guideline.version,
        guideline.render().trim_end(),
        prompts::GOLD_MARKER,
        gold.to_json(),
        prompts::PREDICTED_MARKER,
        predicted.to_json()
    );
    let errors = classify_errors(predicted, gold);
    if !errors.is_empty() {
        s.push_str("Observed discrepancies:\n");
        for e in &errors {
            let show = |m: &Option<EntityMention>| m.as_ref().map(|m| m.to_string()).unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "- {} candidate: gold {} / predicted {}\n",
                e.class,
                show(&e.gold),
                show(&e.predicted)
            ));
        }
    }
    s.push('\n');
    s.push_str(prompts::REFLECTOR_RUBRIC);
    s
}

#[derive(Deserialize)]
struct RawLocator {
    entity_type: String,
    subsection: String,
}

#[derive(Deserialize)]
struct RawProposal {
    rule: String,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
struct RawGradient {
    error_class: String,
    #[serde(default)]
    what: String,
    #[serde(default)]
    why: String,
    #[serde(rename = "where")]
    locator: RawLocator,
    how: RawProposal,
}

fn json_object(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

/// Parses and validates a reflector answer against the guideline.
pub fn parse_gradient(
    raw: &str,
    guideline: &AnnotationGuideline,
    gradient_id: &str,
    source_doc_id: &str,
) -> Result<SemanticGradient, String> {
    let body = json_object(raw).ok_or("no JSON object in response")?;
    let g: RawGradient = serde_json::from_str(body).map_err(|e| format!("bad gradient JSON: {e}"))?;
    let error_class: ErrorClass = g.error_class.parse()?;
    let subsection: Subsection = g.locator.subsection.parse()?;
    let entity_type = g.locator.entity_type.trim().to_string();
    if guideline.section(&entity_type).is_none() {
        return Err(format!("where.entity_type {entity_type:?} has no guideline section"));
    }
    if g.how.rule.trim().is_empty() {
        return Err("how.rule is empty".into());
    }
    Ok(SemanticGradient {
        gradient_id: gradient_id.to_string(),
        error_class,
        what: g.what.trim().to_string(),
        why: g.why.trim().to_string(),
        locator: Locator {
            entity_type,
            subsection,
        },
        how: Proposal {
            rule: g.how.rule.trim().to_string(),
            rationale: g.how.rationale.trim().to_string(),
        },
        source_doc_id: source_doc_id.to_string(),
    })
}

/// Asks the reflector for a gradient; an unusable answer is retried once
/// and then becomes a no-op. Gateway errors propagate.
pub fn compute_semantic_gradient(
    doc: &AnnotatedDoc,
    guideline: &AnnotationGuideline,
    predicted: &EntitySet,
    gold: &EntitySet,
    reflector: &Agent,
    gradient_id: &str,
) -> Result<Gradient, GatewayError> {
    let mut messages = vec![
        ChatMessage::system(prompts::REFLECTOR_SYSTEM),
        ChatMessage::user(reflector_prompt(doc, guideline, predicted, gold)),
    ];
    let tag = format!("{}/{}", tags::REFLECT, doc.id);
    let raw = reflector.chat(messages.clone(), tag.clone())?;
    let first = match parse_gradient(&raw, guideline, gradient_id, &doc.id) {
        Ok(g) => return Ok(Gradient::Step(g)),
        Err(reason) => reason,
    };
    log::warn!("reflector answer for {} unusable ({first}); retrying", doc.id);
    messages.push(ChatMessage::assistant(raw));
    messages.push(ChatMessage::user(format!("{}\nProblem: {first}", prompts::REFLECTOR_RETRY)));
    let raw = reflector.chat(messages, format!("{tag}/retry"))?;
    Ok(match parse_gradient(&raw, guideline, gradient_id, &doc.id) {
        Ok(g) => Gradient::Step(g),
        Err(reason) => {
            let err = FirError::ReflectorParseFailure {
                doc_id: doc.id.clone(),
                reason: reason.clone(),
            };
            log::warn!("{err}; skipping");
            Gradient::NoOp {
                gradient_id: gradient_id.to_string(),
                source_doc_id: doc.id.clone(),
                reason,
            }
        }
    })
}

pub const SECTION_CAP: usize = 2000;

fn clean_editor_text(raw: &str) -> String {
    let mut t = raw.trim();
    if let Some(inner) = t.strip_prefix("```") {
        let inner = inner.split_once('\n').map(|(_, b)| b).unwrap_or("");
        t = inner.trim_end().strip_suffix("```").unwrap_or(inner).trim();
    }
    if let Some(inner) = t.strip_prefix(prompts::SECTION_OPEN) {
        t = inner.strip_suffix(prompts::SECTION_CLOSE).unwrap_or(inner).trim();
    }
    t.to_string()
}

/// Applies one gradient through the editor. Only the located subsection
/// changes; an answer over `cap` characters is sent back once for
/// compression. A no-op gradient returns the guideline unchanged.
pub fn apply_gradient(
    guideline: &AnnotationGuideline,
    gradient: &Gradient,
    editor: &Agent,
    cap: usize,
) -> Result<AnnotationGuideline, FirError> {
    let g = match gradient {
        Gradient::NoOp { .. } => return Ok(guideline.clone()),
        Gradient::Step(g) => g,
    };
    let current = guideline
        .subsection(&g.locator.entity_type, g.locator.subsection)
        .ok_or_else(|| FirError::InvalidLocator {
            entity_type: g.locator.entity_type.clone(),
            subsection: g.locator.subsection.as_str().to_string(),
        })?;
    let mut messages = vec![
        ChatMessage::system(prompts::EDITOR_SYSTEM),
        ChatMessage::user(prompts::editor_request(
            &g.locator.entity_type,
            g.locator.subsection.title(),
            current,
            &g.summary(),
            &g.how.rule,
            cap,
        )),
    ];
    let tag = format!("{}/{}", tags::EDIT, g.gradient_id);
    let raw = editor.chat(messages.clone(), tag.clone())?;
    let mut text = clean_editor_text(&raw);
    if text.chars().count() > cap {
        messages.push(ChatMessage::assistant(raw));
        messages.push(ChatMessage::user(prompts::editor_compress(&text, cap)));
        text = clean_editor_text(&editor.chat(messages, format!("{tag}/compress"))?);
        let chars = text.chars().count();
        if chars > cap {
            return Err(FirError::EditorOverCap { chars, cap });
        }
    }
    Ok(guideline.revise(&g.locator.entity_type, g.locator.subsection, text, &g.gradient_id)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Best,
    Last,
}

impl FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "best" => Ok(SelectionMode::Best),
            "last" => Ok(SelectionMode::Last),
            _ => Err(format!("unknown selection mode {s:?} (best, last)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FirConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub subset_fraction: f64,
    pub seed: u64,
    pub mode: SelectionMode,
    pub rounding: Rounding,
    pub section_cap: usize,
}

impl Default for FirConfig {
    fn default() -> Self {
        FirConfig {
            epochs: 5,
            batch_size: 1,
            subset_fraction: 0.01,
            seed: 0,
            mode: SelectionMode::Best,
            rounding: Rounding::Ceil,
            section_cap: SECTION_CAP,
        }
    }
}

impl FirConfig {
    pub fn validate(&self) -> Result<(), FirError> {
        if self.batch_size != 1 {
            return Err(FirError::Config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(FirError::Config("epochs must be at least 1".into()));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(FirError::Config(format!(
                "subset_fraction must be in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        if self.section_cap == 0 {
            return Err(FirError::Config("section_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowOutcome {
    Correct,
    Applied,
    ReflectorSkipped,
    EditorSkipped,
    ForwardFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub doc_id: String,
    /// `None` when the forward pass itself failed.
    pub l_err: Option<u8>,
    pub gradient_id: Option<String>,
    /// Version the forward pass ran under.
    pub guideline_version: u32,
    pub outcome: RowOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochScore {
    pub epoch: usize,
    pub guideline_version: u32,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirState {
    pub current_guideline: AnnotationGuideline,
    pub epoch: usize,
    pub sample_cursor: usize,
    pub history: Vec<HistoryRow>,
    pub validation: Vec<EpochScore>,
    /// Guideline at the end of each epoch, index = epoch - 1.
    pub snapshots: Vec<AnnotationGuideline>,
}

impl FirState {
    pub fn applied(&self) -> usize {
        self.history.iter().filter(|r| r.outcome == RowOutcome::Applied).count()
    }

    pub fn skipped(&self) -> usize {
        self.history
            .iter()
            .filter(|r| matches!(r.outcome, RowOutcome::ReflectorSkipped | RowOutcome::EditorSkipped))
            .count()
    }

    /// Epoch whose snapshot is P*: best validation micro F1 (earliest on
    /// ties) or simply the last epoch.
    pub fn selected_epoch(&self, mode: SelectionMode) -> Option<usize> {
        match mode {
            SelectionMode::Last => self.validation.last().map(|v| v.epoch),
            SelectionMode::Best => {
                let scores: Vec<f64> = self.validation.iter().map(|v| v.micro_f1).collect();
                crate::instruction::argmax_first(&scores).map(|i| self.validation[i].epoch)
            }
        }
    }
}

pub struct FirAgents {
    pub executor: Executor,
    pub reflector: Agent,
    pub editor: Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirOutcome {
    pub final_guideline: AnnotationGuideline,
    pub selected_epoch: Option<usize>,
    pub d_sub_ids: Vec<String>,
    pub state: FirState,
}

struct RunWriter<'a> {
    dir: Option<&'a Path>,
}

impl RunWriter<'_> {
    fn io(path: &Path, e: impl ToString) -> FirError {
        FirError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), FirError> {
        match self.dir {
            Some(d) => Ok(write_json(&d.join(name), value)?),
            None => Ok(()),
        }
    }

    fn guideline(&self, g: &AnnotationGuideline) -> Result<(), FirError> {
        match self.dir {
            Some(d) => Ok(save_guideline(d, g)?),
            None => Ok(()),
        }
    }

    fn row(&self, row: &HistoryRow) -> Result<(), FirError> {
        let Some(d) = self.dir else { return Ok(()) };
        use std::io::Write;
        let path = d.join("history.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Self::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(row).expect("rows serialize")).map_err(|e| Self::io(&path, e))
    }
}

/// Samples the training subset from the bundle and refines on it,
/// validating on dev (or train when there is no dev split).
pub fn run_fir(
    bundle: &DatasetBundle,
    initial: &InstructionSet,
    config: &FirConfig,
    agents: &FirAgents,
    run_dir: Option<&Path>,
) -> Result<FirOutcome, FirError> {
    config.validate()?;
    let d_sub = stratified_subsample(&bundle.train, config.subset_fraction, config.seed, config.rounding)?;
    run_fir_on(&d_sub, bundle.validation_docs(), initial, config, agents, run_dir)
}

pub fn run_fir_on(
    d_sub: &[AnnotatedDoc],
    validation: &[AnnotatedDoc],
    initial: &InstructionSet,
    config: &FirConfig,
    agents: &FirAgents,
    run_dir: Option<&Path>,
) -> Result<FirOutcome, FirError> {
    config.validate()?;
    let mut guideline = initial
        .procedure
        .clone()
        .ok_or(InstructionError::MissingComponent {
            variant: Variant::Full,
            component: "annotation guideline",
        })?;
    if initial.technique.is_none() {
        return Err(InstructionError::MissingComponent {
            variant: Variant::Full,
            component: "guiding strategy",
        }
        .into());
    }
    let out = RunWriter { dir: run_dir };
    if let Some(d) = run_dir {
        fs::create_dir_all(d.join("gradients")).map_err(|e| RunWriter::io(d, e))?;
        let history = d.join("history.jsonl");
        fs::write(&history, "").map_err(|e| RunWriter::io(&history, e))?;
    }
    out.json("config.json", config)?;
    out.json(
        "d_sub.json",
        &d_sub.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(),
    )?;
    out.guideline(&guideline)?;

    let mut state = FirState {
        current_guideline: guideline.clone(),
        epoch: 0,
        sample_cursor: 0,
        history: Vec::new(),
        validation: Vec::new(),
        snapshots: Vec::new(),
    };
    let mut seq = 0usize;

    for epoch in 1..=config.epochs {
        state.epoch = epoch;
        for (cursor, doc) in d_sub.iter().enumerate() {
            state.sample_cursor = cursor;
            let set = initial.with_guideline(guideline.clone());
            let mut row = HistoryRow {
                epoch,
                doc_id: doc.id.clone(),
                l_err: None,
                gradient_id: None,
                guideline_version: guideline.version,
                outcome: RowOutcome::ForwardFailed,
                note: None,
            };
            match forward_pass(doc, &set, &agents.executor) {
                Err(e) if e.is_fatal() => return Err(e),
                Err(e) => {
                    log::warn!("forward pass failed on {}: {e}", doc.id);
                    row.note = Some(e.to_string());
                }
                Ok(fwd) => {
                    let l_err = error_signal(&fwd.predicted, &doc.gold);
                    row.l_err = Some(l_err);
                    row.outcome = RowOutcome::Correct;
                    if l_err == 1 {
                        seq += 1;
                        let gid = format!("g{seq:04}");
                        row.gradient_id = Some(gid.clone());
                        let gradient = match compute_semantic_gradient(
                            doc,
                            &guideline,
                            &fwd.predicted,
                            &doc.gold,
                            &agents.reflector,
                            &gid,
                        ) {
                            Ok(g) => g,
                            Err(e) if e.is_fatal() => return Err(e.into()),
                            Err(e) => Gradient::NoOp {
                                gradient_id: gid.clone(),
                                source_doc_id: doc.id.clone(),
                                reason: e.to_string(),
                            },
                        };
                        out.json(&format!("gradients/{gid}.json"), &gradient)?;
                        match &gradient {
                            Gradient::NoOp { reason, .. } => {
                                row.outcome = RowOutcome::ReflectorSkipped;
                                row.note = Some(reason.clone());
                            }
                            Gradient::Step(_) => {
                                match apply_gradient(&guideline, &gradient, &agents.editor, config.section_cap) {
                                    Ok(next) => {
                                        guideline = next;
                                        out.guideline(&guideline)?;
                                        row.outcome = RowOutcome::Applied;
                                    }
                                    Err(e) if e.is_fatal() => return Err(e),
                                    Err(e) => {
                                        log::warn!("editor skipped {gid}: {e}");
                                        row.outcome = RowOutcome::EditorSkipped;
                                        row.note = Some(e.to_string());
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out.row(&row)?;
            state.history.push(row);
            state.current_guideline = guideline.clone();
        }

        let instruction = render_instruction_set(&initial.with_guideline(guideline.clone()), Variant::Full)?;
        let preds = agents.executor.predict_all(&instruction, validation)?;
        let report = metrics::score(&preds, validation, &agents.executor.schema, MacroAveraging::GoldObserved)?;
        log::info!(
            "epoch {epoch}: guideline v{} validation micro {:.4} macro {:.4}",
            guideline.version,
            report.micro_f1,
            report.macro_f1
        );
        state.validation.push(EpochScore {
            epoch,
            guideline_version: guideline.version,
            micro_f1: report.micro_f1,
            macro_f1: report.macro_f1,
        });
        state.snapshots.push(guideline.clone());
        out.json("validation.json", &state.validation)?;
    }

    let selected_epoch = state.selected_epoch(config.mode);
    let final_guideline = selected_epoch
        .map(|e| state.snapshots[e - 1].clone())
        .unwrap_or_else(|| guideline.clone());
    out.json(
        "final.json",
        &BTreeMap::from([
            ("selected_epoch", serde_json::json!(selected_epoch)),
            ("guideline_version", serde_json::json!(final_guideline.version)),
            ("mode", serde_json::json!(config.mode)),
        ]),
    )?;
    Ok(FirOutcome {
        final_guideline,
        selected_epoch,
        d_sub_ids: d_sub.iter().map(|d| d.id.clone()).collect(),
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSchema;
    use crate::instruction::{GuidelineSection, GuidingStrategy, TaskInstruction};
    use crate::llm::{ChatRequest, FnBackend, Gateway, Matcher, MockReply, MockScript, ScriptedBackend};
    use std::sync::Arc;

    fn m(span: &str, ty: &str) -> EntityMention {
        EntityMention::new(span, ty)
    }

    fn set(ms: &[EntityMention]) -> EntitySet {
        ms.iter().cloned().collect()
    }

    fn schema() -> LabelSchema {
        LabelSchema::from_names("s", &["Malware", "Tool"]).unwrap()
    }

    fn guideline() -> AnnotationGuideline {
        AnnotationGuideline::initial(
            ["Malware", "Tool"]
                .iter()
                .map(|t| GuidelineSection {
                    entity_type: t.to_string(),
                    definition_and_description: format!("{t} names."),
                    notes_and_exceptions: "None yet.".into(),
                })
                .collect(),
        )
    }

    fn agent(script: MockScript) -> (Agent, Arc<ScriptedBackend>) {
        let b = Arc::new(ScriptedBackend::new(script));
        (Agent::new(Arc::new(Gateway::new(b.clone())), "m"), b)
    }

    fn doc(id: &str, text: &str, gold: &[EntityMention]) -> AnnotatedDoc {
        AnnotatedDoc::new(id, text, set(gold))
    }

    const FN_GRADIENT: &str = r#"{"error_class":"FN","what":"missed Emotet","why":"no rule","where":{"entity_type":"Malware","subsection":"notes_and_exceptions"},"how":{"rule":"Always tag Emotet.","rationale":"it is malware"}}"#;

    #[test]
    fn error_signal_cases() {
        assert_eq!(error_signal(&set(&[m("a", "T")]), &set(&[m("a", "T")])), 0);
        assert_eq!(error_signal(&EntitySet::new(), &EntitySet::new()), 0);
        assert_eq!(error_signal(&set(&[m("a", "T2")]), &set(&[m("a", "T1")])), 1);
    }

    #[test]
    fn classification_taxonomy() {
        let gold = set(&[m("Emotet", "Malware"), m("Cobalt Strike", "Tool"), m("APT28", "Tool")]);
        let pred = set(&[m("Emotet", "Tool"), m("Cobalt", "Tool"), m("noise", "Malware")]);
        let mut classes: Vec<ErrorClass> = classify_errors(&pred, &gold).iter().map(|e| e.class).collect();
        classes.sort();
        assert_eq!(classes, vec![ErrorClass::FN, ErrorClass::FP, ErrorClass::BE, ErrorClass::CE]);
        let missed_only = classify_errors(&EntitySet::new(), &set(&[m("x", "Malware")]));
        assert_eq!(missed_only[0].class, ErrorClass::FN);
    }

    #[test]
    fn forward_pass_parses_executor_output() {
        let d = doc("d", "Emotet spreads.", &[m("Emotet", "Malware")]);
        let s = InstructionSet::full(
            TaskInstruction::for_schema(&schema()),
            GuidingStrategy {
                id: "s1".into(),
                text: "x".into(),
                origin_model_id: "m".into(),
                score: None,
                macro_score: None,
            },
            guideline(),
        );
        for (reply, n) in [(r#"[{"span":"Emotet","type":"Malware"}]"#, 1), ("[]", 0), ("garbage", 0)] {
            let (a, _) = agent(MockScript::constant(reply));
            let r = forward_pass(&d, &s, &Executor::new(a, schema())).unwrap();
            assert_eq!(r.predicted.len(), n);
            assert_eq!(r.guideline_version, Some(0));
        }
    }

    #[test]
    fn valid_gradient_parses() {
        let d = doc("d", "Emotet", &[m("Emotet", "Malware")]);
        let (a, b) = agent(MockScript::constant(format!("Here:\n{FN_GRADIENT}")));
        let g = compute_semantic_gradient(&d, &guideline(), &EntitySet::new(), &d.gold, &a, "g1").unwrap();
        let Gradient::Step(g) = g else { panic!("expected a gradient") };
        assert_eq!(g.error_class, ErrorClass::FN);
        assert_eq!(g.locator.subsection, Subsection::NotesAndExceptions);
        assert!(b.requests()[0].content().contains("FN candidate"));
    }

    #[test]
    fn bad_locator_retries_then_noops() {
        let bad = FN_GRADIENT.replace("\"Malware\"", "\"Vulnerability\"");
        let d = doc("d", "Emotet", &[m("Emotet", "Malware")]);
        let (a, b) = agent(MockScript::constant(bad.clone()));
        let g = compute_semantic_gradient(&d, &guideline(), &EntitySet::new(), &d.gold, &a, "g1").unwrap();
        assert!(matches!(g, Gradient::NoOp { .. }));
        assert_eq!(b.calls(), 2);

        let (a, _) = agent(MockScript::default().rule(
            Matcher::any(),
            vec![MockReply::text(bad), MockReply::text(FN_GRADIENT)],
        ));
        let g = compute_semantic_gradient(&d, &guideline(), &EntitySet::new(), &d.gold, &a, "g1").unwrap();
        assert!(matches!(g, Gradient::Step(_)));
    }

    fn step(ty: &str) -> Gradient {
        Gradient::Step(parse_gradient(&FN_GRADIENT.replace("\"Malware\"", &format!("\"{ty}\"")), &guideline(), &format!("g-{ty}"), "d").unwrap())
    }

    #[test]
    fn apply_changes_only_the_target() {
        let (ed, _) = agent(MockScript::constant("Always tag Emotet."));
        let g0 = guideline();
        let g1 = apply_gradient(&g0, &step("Malware"), &ed, SECTION_CAP).unwrap();
        assert_eq!(g1.version, 1);
        assert_eq!(g1.sections[1], g0.sections[1]);
        assert_eq!(g1.sections[0].definition_and_description, g0.sections[0].definition_and_description);
        assert_eq!(g1.sections[0].notes_and_exceptions, "Always tag Emotet.");
        let g2 = apply_gradient(&g1, &step("Tool"), &ed, SECTION_CAP).unwrap();
        assert_eq!(g2.version, 2);
        assert_eq!(g2.changelog.len(), 2);
        assert_eq!(g2.sections[1].notes_and_exceptions, "Always tag Emotet.");
    }

    #[test]
    fn noop_leaves_guideline_untouched() {
        let (ed, b) = agent(MockScript::constant("x"));
        let noop = Gradient::NoOp {
            gradient_id: "g".into(),
            source_doc_id: "d".into(),
            reason: "r".into(),
        };
        assert_eq!(apply_gradient(&guideline(), &noop, &ed, SECTION_CAP).unwrap(), guideline());
        assert_eq!(b.calls(), 0);
    }

    #[test]
    fn over_cap_is_compressed_or_rejected() {
        let long = "x".repeat(50);
        let (ed, _) = agent(
            MockScript::default()
                .rule(Matcher::contains("over the 20-character limit"), vec![MockReply::text("short")])
                .rule(Matcher::any(), vec![MockReply::text(long.clone())]),
        );
        let g = apply_gradient(&guideline(), &step("Malware"), &ed, 20).unwrap();
        assert_eq!(g.sections[0].notes_and_exceptions, "short");
        let (ed, _) = agent(MockScript::constant(long));
        assert!(matches!(
            apply_gradient(&guideline(), &step("Malware"), &ed, 20),
            Err(FirError::EditorOverCap { chars: 50, cap: 20 })
        ));
    }

    #[test]
    fn config_rejects_batches() {
        let c = FirConfig {
            batch_size: 2,
            ..FirConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(FirConfig { epochs: 0, ..FirConfig::default() }.validate().is_err());
    }

    #[test]
    fn best_epoch_prefers_earliest_maximum() {
        let mut st = FirState {
            current_guideline: guideline(),
            epoch: 3,
            sample_cursor: 0,
            history: vec![],
            validation: vec![],
            snapshots: vec![],
        };
        for (e, f) in [(1, 0.5), (2, 0.8), (3, 0.8)] {
            st.validation.push(EpochScore {
                epoch: e,
                guideline_version: e as u32,
                micro_f1: f,
                macro_f1: f,
            });
        }
        assert_eq!(st.selected_epoch(SelectionMode::Best), Some(2));
        assert_eq!(st.selected_epoch(SelectionMode::Last), Some(3));
    }

    #[test]
    fn always_correct_executor_never_updates() {
        let docs = vec![doc("a", "Emotet", &[m("Emotet", "Malware")]), doc("b", "Emotet", &[m("Emotet", "Malware")])];
        let exec = Agent::new(
            Arc::new(Gateway::new(Arc::new(FnBackend::new("gold", |_r: &ChatRequest| {
                Ok(r#"[{"span":"Emotet","type":"Malware"}]"#.into())
            })))),
            "exec",
        );
        let (refl, rb) = agent(MockScript::constant(FN_GRADIENT));
        let (ed, _) = agent(MockScript::constant("x"));
        let initial = InstructionSet::full(
            TaskInstruction::for_schema(&schema()),
            GuidingStrategy {
                id: "s1".into(),
                text: "x".into(),
                origin_model_id: "m".into(),
                score: None,
                macro_score: None,
            },
            guideline(),
        );
        let agents = FirAgents {
            executor: Executor::new(exec, schema()),
            reflector: refl,
            editor: ed,
        };
        let cfg = FirConfig {
            epochs: 2,
            ..FirConfig::default()
        };
        let out = run_fir_on(&docs, &docs, &initial, &cfg, &agents, None).unwrap();
        assert_eq!(out.final_guideline.version, 0);
        assert!(out.state.history.iter().all(|r| r.l_err == Some(0)));
        assert_eq!(out.state.validation.len(), 2);
        assert_eq!(rb.calls(), 0);
    }
}
