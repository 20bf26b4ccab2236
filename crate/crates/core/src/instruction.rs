//! The three-level instruction hierarchy: a task instruction (tactic), a
//! guiding strategy chosen by generate-then-select (technique), and per-type
//! annotation guidelines (procedure).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedDoc, LabelSchema};
use crate::executor::{Executor, ExecutorError};
use crate::llm::{Agent, ChatMessage, GatewayError};
use crate::metrics::{self, MacroAveraging, MetricsError};
use crate::prompts::{self, tags};

#[derive(Debug, Error)]
pub enum InstructionError {
    #[error("strategy generation produced {got} of {wanted} strategies")]
    GenerationShortfall { wanted: usize, got: usize },
    #[error("guideline response for {entity_type} is malformed: {reason}")]
    MalformedGuidelineResponse { entity_type: String, reason: String },
    #[error("variant {variant} needs a {component}")]
    MissingComponent { variant: Variant, component: &'static str },
    #[error("guideline has no section for {0}")]
    UnknownSection(String),
    #[error("guideline does not match schema: {0}")]
    SchemaMismatch(String),
    #[error("no strategies to select from")]
    NoStrategies,
    #[error("{path}: {message}")]
    Store { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl InstructionError {
    pub fn is_fatal(&self) -> bool {
        match self {
            InstructionError::Gateway(g) => g.is_fatal(),
            InstructionError::Executor(e) => e.is_fatal(),
            _ => false,
        }
    }
}

pub type Result<T, E = InstructionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub text: String,
}

impl TaskInstruction {
    pub fn for_schema(schema: &LabelSchema) -> Self {
        TaskInstruction {
            text: prompts::task_instruction(schema),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidingStrategy {
    pub id: String,
    pub text: String,
    pub origin_model_id: String,
    /// Micro F1 on the selection subset.
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub macro_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsection {
    DefinitionAndDescription,
    NotesAndExceptions,
}

impl Subsection {
    pub const ALL: [Subsection; 2] = [Subsection::DefinitionAndDescription, Subsection::NotesAndExceptions];

    pub fn title(self) -> &'static str {
        match self {
            Subsection::DefinitionAndDescription => prompts::DEFINITION_HEADING,
            Subsection::NotesAndExceptions => prompts::NOTES_HEADING,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subsection::DefinitionAndDescription => "definition_and_description",
            Subsection::NotesAndExceptions => "notes_and_exceptions",
        }
    }
}

impl FromStr for Subsection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        match norm.as_str() {
            "definition_and_description" | "definition" => Ok(Subsection::DefinitionAndDescription),
            "notes_and_exceptions" | "notes" => Ok(Subsection::NotesAndExceptions),
            _ => Err(format!("unknown guideline subsection {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineSection {
    pub entity_type: String,
    pub definition_and_description: String,
    pub notes_and_exceptions: String,
}

impl GuidelineSection {
    pub fn get(&self, sub: Subsection) -> &str {
        match sub {
            Subsection::DefinitionAndDescription => &self.definition_and_description,
            Subsection::NotesAndExceptions => &self.notes_and_exceptions,
        }
    }

    fn get_mut(&mut self, sub: Subsection) -> &mut String {
        match sub {
            Subsection::DefinitionAndDescription => &mut self.definition_and_description,
            Subsection::NotesAndExceptions => &mut self.notes_and_exceptions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangelogEntry {
    pub version: u32,
    pub gradient_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationGuideline {
    pub version: u32,
    /// One section per schema type, in schema order.
    pub sections: Vec<GuidelineSection>,
    pub changelog: Vec<ChangelogEntry>,
}

impl AnnotationGuideline {
    pub fn initial(sections: Vec<GuidelineSection>) -> Self {
        AnnotationGuideline {
            version: 0,
            sections,
            changelog: Vec::new(),
        }
    }

    pub fn section(&self, entity_type: &str) -> Option<&GuidelineSection> {
        self.sections.iter().find(|s| s.entity_type == entity_type)
    }

    pub fn subsection(&self, entity_type: &str, sub: Subsection) -> Option<&str> {
        self.section(entity_type).map(|s| s.get(sub))
    }

    /// A new guideline, one version later, with one subsection replaced.
    pub fn revise(&self, entity_type: &str, sub: Subsection, text: String, gradient_id: &str) -> Result<Self> {
        let mut next = self.clone();
        let section = next
            .sections
            .iter_mut()
            .find(|s| s.entity_type == entity_type)
            .ok_or_else(|| InstructionError::UnknownSection(entity_type.to_string()))?;
        *section.get_mut(sub) = text;
        next.version += 1;
        next.changelog.push(ChangelogEntry {
            version: next.version,
            gradient_id: gradient_id.to_string(),
        });
        Ok(next)
    }

    pub fn validate(&self, schema: &LabelSchema) -> Result<()> {
        let types: Vec<&str> = self.sections.iter().map(|s| s.entity_type.as_str()).collect();
        let expected: Vec<&str> = schema.type_names().collect();
        if types != expected {
            return Err(InstructionError::SchemaMismatch(format!(
                "sections {types:?}, schema {expected:?}"
            )));
        }
        let versions: Vec<u32> = self.changelog.iter().map(|c| c.version).collect();
        if versions != (1..=self.version).collect::<Vec<_>>() {
            return Err(InstructionError::SchemaMismatch(format!(
                "changelog versions {versions:?} do not run 1..={}",
                self.version
            )));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, sec) in self.sections.iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            s.push_str(&format!(
                "### {}\n#### {}\n{}\n#### {}\n{}\n",
                sec.entity_type,
                Subsection::DefinitionAndDescription.title(),
                sec.definition_and_description.trim_end(),
                Subsection::NotesAndExceptions.title(),
                sec.notes_and_exceptions.trim_end()
            ));
        }
        s
    }
}

/// Ablation variants: task instruction only, plus strategy, plus the
/// initial guideline, and the full set with a refined guideline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    PlusStrategy,
    PlusGuideline,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::PlusStrategy, Variant::PlusGuideline, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::PlusStrategy => "plus_strategy",
            Variant::PlusGuideline => "plus_guideline",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown variant {s:?} (base, plus_strategy, plus_guideline, full)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSet {
    pub tactic: TaskInstruction,
    pub technique: Option<GuidingStrategy>,
    pub procedure: Option<AnnotationGuideline>,
}

impl InstructionSet {
    pub fn full(tactic: TaskInstruction, technique: GuidingStrategy, procedure: AnnotationGuideline) -> Self {
        InstructionSet {
            tactic,
            technique: Some(technique),
            procedure: Some(procedure),
        }
    }

    pub fn with_guideline(&self, guideline: AnnotationGuideline) -> Self {
        InstructionSet {
            procedure: Some(guideline),
            ..self.clone()
        }
    }
}

pub const STRATEGY_HEADING: &str = "Guiding strategy:";
pub const GUIDELINE_HEADING: &str = "Annotation guideline:";

/// Deterministic instruction text for a variant. The full variant carries a
/// revision line, so it differs from `plus_guideline` even when the
/// guideline itself is unchanged.
pub fn render_instruction_set(set: &InstructionSet, variant: Variant) -> Result<String> {
    let mut out = set.tactic.text.trim_end().to_string();
    if variant == Variant::Base {
        return Ok(out);
    }
    let strategy = set.technique.as_ref().ok_or(InstructionError::MissingComponent {
        variant,
        component: "guiding strategy",
    })?;
    out.push_str(&format!("\n\n{STRATEGY_HEADING}\n{}", strategy.text.trim()));
    if variant == Variant::PlusStrategy {
        return Ok(out);
    }
    let guideline = set.procedure.as_ref().ok_or(InstructionError::MissingComponent {
        variant,
        component: "annotation guideline",
    })?;
    out.push_str(&format!("\n\n{GUIDELINE_HEADING}\n"));
    if variant == Variant::Full {
        out.push_str(&format!("Guideline revision: v{}\n", guideline.version));
    }
    out.push_str(guideline.render().trim_end());
    Ok(out)
}

/// Numbered list items (`1. x`, `2) y`), in order, without numbering.
pub fn parse_numbered_list(raw: &str) -> Vec<String> {
    let re = Regex::new(r"^\s*(?:\*\*)?\d+(?:\*\*)?[.)]\s+(.+?)\s*$").expect("static regex");
    raw.lines()
        .filter_map(|l| re.captures(l).map(|c| c[1].trim_matches('*').trim().to_string()))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Follow-up requests allowed after the first strategy request.
pub const STRATEGY_FOLLOWUPS: usize = 3;

pub fn generate_strategies(n: usize, schema: &LabelSchema, generator: &Agent) -> Result<Vec<GuidingStrategy>> {
    assert!(n >= 1, "at least one strategy must be requested");
    let mut texts: Vec<String> = Vec::new();
    for attempt in 0..=STRATEGY_FOLLOWUPS {
        let user = if attempt == 0 {
            prompts::strategies_request(schema, n)
        } else {
            prompts::strategies_followup(schema, &texts, n - texts.len())
        };
        let raw = generator.chat(
            vec![ChatMessage::system(prompts::STRATEGIST_SYSTEM), ChatMessage::user(user)],
            format!("{}/{attempt}", tags::STRATEGIES),
        )?;
        let before = texts.len();
        for t in parse_numbered_list(&raw) {
            if texts.len() < n && !texts.contains(&t) {
                texts.push(t);
            }
        }
        if texts.len() == n {
            break;
        }
        // at temperature 0 an unchanged follow-up would only replay the same answer
        if attempt > 0 && texts.len() == before {
            break;
        }
        log::info!("strategy generator delivered {} of {n}; asking again", texts.len());
    }
    if texts.len() < n {
        return Err(InstructionError::GenerationShortfall {
            wanted: n,
            got: texts.len(),
        });
    }
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| GuidingStrategy {
            id: format!("s{}", i + 1),
            text,
            origin_model_id: generator.model().to_string(),
            score: None,
            macro_score: None,
        })
        .collect())
}

/// Index of the largest score; the earliest index wins ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySelection {
    pub strategies: Vec<GuidingStrategy>,
    pub selected: usize,
}

impl StrategySelection {
    pub fn best(&self) -> &GuidingStrategy {
        &self.strategies[self.selected]
    }
}

/// Scores each strategy by running the executor with the task instruction
/// and that strategy (no guideline, no demos) over `d_sub`.
pub fn select_strategy(
    strategies: Vec<GuidingStrategy>,
    d_sub: &[AnnotatedDoc],
    tactic: &TaskInstruction,
    executor: &Executor,
) -> Result<StrategySelection> {
    if strategies.is_empty() {
        return Err(InstructionError::NoStrategies);
    }
    let mut scored = Vec::with_capacity(strategies.len());
    for s in strategies {
        let set = InstructionSet {
            tactic: tactic.clone(),
            technique: Some(s.clone()),
            procedure: None,
        };
        let text = render_instruction_set(&set, Variant::PlusStrategy)?;
        let preds = executor.predict_all(&text, d_sub)?;
        let report = metrics::score(&preds, d_sub, &executor.schema, MacroAveraging::GoldObserved)?;
        log::info!("strategy {}: micro {:.4} macro {:.4}", s.id, report.micro_f1, report.macro_f1);
        scored.push(GuidingStrategy {
            score: Some(report.micro_f1),
            macro_score: Some(report.macro_f1),
            ..s
        });
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.score.unwrap_or(0.0)).collect();
    let selected = argmax_first(&scores).expect("non-empty");
    Ok(StrategySelection {
        strategies: scored,
        selected,
    })
}

fn heading_text(line: &str) -> Option<String> {
    let t = line.trim().trim_start_matches('#').trim();
    let t = t.trim_matches('*').trim().trim_end_matches(':').trim();
    let t = t.trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')').trim();
    let t = t.trim_matches('*').trim();
    (!t.is_empty()).then(|| t.to_ascii_lowercase())
}

/// Splits a guideline response into its two subsections by heading.
pub fn parse_guideline_section(entity_type: &str, raw: &str) -> Result<GuidelineSection, String> {
    let def = prompts::DEFINITION_HEADING.to_ascii_lowercase();
    let notes = prompts::NOTES_HEADING.to_ascii_lowercase();
    let mut current: Option<Subsection> = None;
    let mut bodies: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    let mut seen = [false, false];
    for line in raw.lines() {
        match heading_text(line) {
            Some(h) if h == def => {
                current = Some(Subsection::DefinitionAndDescription);
                seen[0] = true;
                continue;
            }
            Some(h) if h == notes => {
                current = Some(Subsection::NotesAndExceptions);
                seen[1] = true;
                continue;
            }
            _ => {}
        }
        match current {
            Some(Subsection::DefinitionAndDescription) => bodies[0].push(line),
            Some(Subsection::NotesAndExceptions) => bodies[1].push(line),
            None => {}
        }
    }
    let text = |i: usize| bodies[i].join("\n").trim().to_string();
    for (i, sub) in Subsection::ALL.iter().enumerate() {
        if !seen[i] {
            return Err(format!("missing \"{}\" subsection", sub.title()));
        }
        if text(i).is_empty() {
            return Err(format!("empty \"{}\" subsection", sub.title()));
        }
    }
    Ok(GuidelineSection {
        entity_type: entity_type.to_string(),
        definition_and_description: text(0),
        notes_and_exceptions: text(1),
    })
}

/// One generation request per schema type; a malformed answer gets one
/// reminder before failing.
pub fn generate_guideline(schema: &LabelSchema, generator: &Agent) -> Result<AnnotationGuideline> {
    let mut sections = Vec::with_capacity(schema.len());
    for ty in schema.type_names() {
        let mut messages = vec![
            ChatMessage::system(prompts::GUIDELINE_SYSTEM),
            ChatMessage::user(prompts::guideline_request(schema, ty)),
        ];
        let raw = generator.chat(messages.clone(), format!("{}/{ty}", tags::GUIDELINE))?;
        let section = match parse_guideline_section(ty, &raw) {
            Ok(s) => s,
            Err(first) => {
                log::warn!("guideline for {ty}: {first}; sending reminder");
                messages.push(ChatMessage::assistant(raw));
                messages.push(ChatMessage::user(prompts::guideline_reminder()));
                let retry = generator.chat(messages, format!("{}/{ty}/retry", tags::GUIDELINE))?;
                parse_guideline_section(ty, &retry).map_err(|reason| InstructionError::MalformedGuidelineResponse {
                    entity_type: ty.to_string(),
                    reason,
                })?
            }
        };
        sections.push(section);
    }
    Ok(AnnotationGuideline::initial(sections))
}

fn store_err(path: &Path, e: impl ToString) -> InstructionError {
    InstructionError::Store {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| store_err(dir, e))?;
    }
    let raw = serde_json::to_string_pretty(value).expect("values serialize");
    fs::write(path, raw + "\n").map_err(|e| store_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).map_err(|e| store_err(path, e))?;
    serde_json::from_str(&raw).map_err(|e| store_err(path, e))
}

/// Writes `guideline_v<N>.json` and refreshes `changelog.json`.
pub fn save_guideline(dir: &Path, g: &AnnotationGuideline) -> Result<()> {
    write_json(&dir.join(format!("guideline_v{}.json", g.version)), g)?;
    write_json(&dir.join("changelog.json"), &g.changelog)
}

pub fn load_guideline(dir: &Path, version: u32) -> Result<AnnotationGuideline> {
    read_json(&dir.join(format!("guideline_v{version}.json")))
}

/// Highest-numbered guideline in a directory.
pub fn latest_guideline(dir: &Path) -> Result<AnnotationGuideline> {
    let re = Regex::new(r"^guideline_v(\d+)\.json$").expect("static regex");
    let max = fs::read_dir(dir)
        .map_err(|e| store_err(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            re.captures(&name).and_then(|c| c[1].parse::<u32>().ok())
        })
        .max()
        .ok_or_else(|| store_err(dir, "no guideline_v*.json files"))?;
    load_guideline(dir, max)
}

pub fn save_strategies(path: &Path, selection: &StrategySelection) -> Result<()> {
    write_json(path, selection)
}

pub fn load_strategies(path: &Path) -> Result<StrategySelection> {
    read_json(path)
}
