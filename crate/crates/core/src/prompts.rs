//! Prompt wording for every agent role, versioned as one asset.
//!
//! The simulated backend in [`crate::llm::SimulatedAgents`] parses the
//! marker lines defined here, so changes to a marker must be mirrored there.

use crate::corpus::LabelSchema;

pub const PROMPT_VERSION: &str = "prompts-v1";

pub const GOLD_MARKER: &str = "Gold entities: ";
pub const PREDICTED_MARKER: &str = "Predicted entities: ";
pub const SECTION_OPEN: &str = "<<<";
pub const SECTION_CLOSE: &str = ">>>";
pub const RULE_MARKER: &str = "- Proposed rule: ";

/// Request tag prefixes; the tag is provenance only and never part of a cache key.
pub mod tags {
    pub const EXECUTE: &str = "execute";
    pub const STRATEGIES: &str = "strategies";
    pub const GUIDELINE: &str = "guideline";
    pub const REFLECT: &str = "reflect";
    pub const EDIT: &str = "edit";
}

pub fn task_instruction(schema: &LabelSchema) -> String {
    let mut s = String::from(
        "You are a cyber threat intelligence analyst performing named entity recognition.\n\
         Extract every mention of the following entity types from the text:\n",
    );
    for t in &schema.types {
        match &t.description {
            Some(d) if !d.trim().is_empty() => s.push_str(&format!("- {}: {}\n", t.name, d.trim())),
            _ => s.push_str(&format!("- {}\n", t.name)),
        }
    }
    s.push_str(
        "Output format: respond with only a JSON array of objects. Each object has a \"span\" \
         field holding the mention exactly as it appears in the text and a \"type\" field holding \
         one of the types above. Respond with [] when the text contains no entities.",
    );
    s
}

pub const STRATEGIST_SYSTEM: &str = "You design guiding strategies for named entity recognition \
    in cyber threat intelligence reports. A strategy describes, in one or two sentences, how an \
    annotator should reason about a text before extracting entities.";

pub fn strategies_request(schema: &LabelSchema, n: usize) -> String {
    format!(
        "Entity types: {}.\nPropose exactly {n} distinct guiding strategies.\n\
         Return them as a numbered list with one strategy per line, formatted as `1. <strategy>`.",
        schema.type_names().collect::<Vec<_>>().join(", ")
    )
}

pub fn strategies_followup(schema: &LabelSchema, have: &[String], missing: usize) -> String {
    let mut s = format!(
        "Entity types: {}.\nYou already proposed these strategies:\n",
        schema.type_names().collect::<Vec<_>>().join(", ")
    );
    for (i, h) in have.iter().enumerate() {
        s.push_str(&format!("{}. {}\n", i + 1, h));
    }
    s.push_str(&format!(
        "Propose exactly {missing} additional distinct strategies, numbered from {}.\n\
         Return them as a numbered list with one strategy per line.",
        have.len() + 1
    ));
    s
}

pub const GUIDELINE_SYSTEM: &str = "You write annotation guidelines for named entity recognition \
    in cyber threat intelligence reports.";

pub const DEFINITION_HEADING: &str = "Definition and Description";
pub const NOTES_HEADING: &str = "Notes and Exceptions";

pub fn guideline_request(schema: &LabelSchema, entity_type: &str) -> String {
    let others: Vec<&str> = schema.type_names().filter(|t| *t != entity_type).collect();
    let mut s = format!("Write the annotation guideline section for the entity type \"{entity_type}\".\n");
    if let Some(d) = schema.description(entity_type) {
        s.push_str(&format!("Type description: {d}\n"));
    }
    if !others.is_empty() {
        s.push_str(&format!("Other entity types in the schema: {}.\n", others.join(", ")));
    }
    s.push_str(&format!(
        "Use exactly two subsections with these headings:\n\
         ## {DEFINITION_HEADING}\n(state the criteria for where a span starts and ends)\n\
         ## {NOTES_HEADING}\n(explain how to handle entity types that are easily confused with this one)"
    ));
    s
}

pub fn guideline_reminder() -> String {
    format!(
        "Your previous answer did not contain both required subsections. Answer again using \
         exactly the headings `## {DEFINITION_HEADING}` and `## {NOTES_HEADING}`."
    )
}

pub const REFLECTOR_SYSTEM: &str = "You are a reflection agent. You diagnose why an entity \
    extraction went wrong and propose one guideline revision that would have prevented it.";

pub const REFLECTOR_RUBRIC: &str = "Analyse the most consequential error with the What-Why-Where-How framework:\n\
What: classify the error as FN (false negative: a gold entity was missed), FP (false positive: a \
predicted entity is not in the gold), BE (boundary error: the right type with wrong span \
boundaries) or CE (classification error: the right span with the wrong type), and describe it.\n\
Why: name the rule in the current guideline that led to the error.\n\
Where: give the entity type and the subsection (definition_and_description or \
notes_and_exceptions) of the guideline that must change.\n\
How: write the new or replacement rule text and explain the rationale.\n\
Respond with only a JSON object of the form \
{\"error_class\": \"FN\", \"what\": \"...\", \"why\": \"...\", \"where\": {\"entity_type\": \"...\", \
\"subsection\": \"notes_and_exceptions\"}, \"how\": {\"rule\": \"...\", \"rationale\": \"...\"}}";

pub const REFLECTOR_RETRY: &str = "Your previous answer could not be used. Respond again with only \
    the JSON object, making sure error_class is one of FN, FP, BE, CE and that where.entity_type \
    and where.subsection name an existing guideline section.";

pub const EDITOR_SYSTEM: &str = "You are an editor agent. You revise one subsection of an \
    annotation guideline so that it incorporates a proposed rule, keeping every other rule that \
    is still valid.";

pub fn editor_request(
    entity_type: &str,
    subsection_title: &str,
    current: &str,
    gradient_summary: &str,
    rule: &str,
    cap: usize,
) -> String {
    format!(
        "Entity type: {entity_type}\nSubsection: {subsection_title}\nCurrent subsection text:\n\
         {SECTION_OPEN}\n{current}\n{SECTION_CLOSE}\nSemantic gradient:\n{gradient_summary}\n\
         {RULE_MARKER}{rule}\n\
         Return only the revised subsection text, at most {cap} characters."
    )
}

pub fn editor_compress(previous: &str, cap: usize) -> String {
    format!(
        "Your revision is {} characters, over the {cap}-character limit. Compress it to at most \
         {cap} characters without dropping any rule. Revision:\n{SECTION_OPEN}\n{previous}\n{SECTION_CLOSE}",
        previous.chars().count()
    )
}
