use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::DemoSet;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {field}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { field: &'static str, name: String },
    #[error("template {field}: missing placeholder {{{name}}}")]
    MissingPlaceholder { field: &'static str, name: &'static str },
    #[error("template file {0}")]
    Load(String),
}

/// Versioned layout of an in-context prompt. Placeholders are `{text}` and
/// `{entities}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub demos_header: String,
    pub demo_block: String,
    pub query_header: String,
    pub query_block: String,
    pub separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            version: "icl-v1".into(),
            demos_header: "Examples:".into(),
            demo_block: "Text: {text}\nEntities: {entities}".into(),
            query_header: "Now extract the entities from the following text.".into(),
            query_block: "Text: {text}\nEntities:".into(),
            separator: "\n\n".into(),
        }
    }
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| TemplateError::Load(format!("{}: {e}", path.display())))?;
        let t: PromptTemplate = serde_json::from_str(&raw)
            .map_err(|e| TemplateError::Load(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        check("demo_block", &self.demo_block, &["text", "entities"])?;
        check("query_block", &self.query_block, &["text"])?;
        for (field, s) in [
            ("demos_header", &self.demos_header),
            ("query_header", &self.query_header),
        ] {
            check(field, s, &[])?;
        }
        Ok(())
    }
}

fn placeholders(s: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let rest = &s[i + 1..];
            let len = rest
                .bytes()
                .take_while(|b| b.is_ascii_lowercase() || *b == b'_')
                .count();
            if len > 0 && rest.as_bytes().get(len) == Some(&b'}') {
                out.push((i, i + len + 2, &rest[..len]));
                i += len + 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn check(field: &'static str, s: &str, required: &[&'static str]) -> Result<(), TemplateError> {
    let found = placeholders(s);
    if let Some((_, _, name)) = found.iter().find(|(_, _, n)| !required.contains(n)) {
        return Err(TemplateError::UnknownPlaceholder {
            field,
            name: name.to_string(),
        });
    }
    for name in required {
        if !found.iter().any(|(_, _, n)| n == name) {
            return Err(TemplateError::MissingPlaceholder { field, name });
        }
    }
    Ok(())
}

/// Single-pass substitution, so values containing `{...}` are left alone.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for (start, end, name) in placeholders(template) {
        out.push_str(&template[last..start]);
        match values.iter().find(|(k, _)| *k == name) {
            Some((_, v)) => out.push_str(v),
            None => out.push_str(&template[start..end]),
        }
        last = end;
    }
    out.push_str(&template[last..]);
    out
}

/// An assembled in-context prompt: instruction, demos, then the query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclPrompt {
    pub instruction_text: String,
    pub demo_blocks: Vec<String>,
    pub query_text: String,
    pub template_version: String,
    /// Demo section plus query, i.e. everything after the instruction.
    pub body: String,
}

impl IclPrompt {
    pub fn render(&self) -> String {
        format!("{}\n\n{}", self.instruction_text, self.body)
    }

    pub fn len_chars(&self) -> usize {
        self.instruction_text.chars().count() + 2 + self.body.chars().count()
    }
}

/// Renders demos in prompt order (most relevant adjacent to the query).
/// Demo entities are serialized in full; nothing is truncated.
pub fn assemble_prompt(
    instruction_text: &str,
    demos: &DemoSet,
    query_text: &str,
    template: &PromptTemplate,
) -> Result<IclPrompt, TemplateError> {
    template.validate()?;
    let demo_blocks: Vec<String> = demos
        .prompt_order()
        .into_iter()
        .map(|d| {
            fill(
                &template.demo_block,
                &[("text", &d.doc.text), ("entities", &d.doc.gold.to_json())],
            )
        })
        .collect();

    let mut sections = Vec::new();
    if !demo_blocks.is_empty() {
        let mut demo_section = template.demos_header.clone();
        for b in &demo_blocks {
            demo_section.push_str(&template.separator);
            demo_section.push_str(b);
        }
        sections.push(demo_section);
    }
    let mut query_section = String::new();
    if !template.query_header.is_empty() {
        query_section.push_str(&template.query_header);
        query_section.push('\n');
    }
    query_section.push_str(&fill(&template.query_block, &[("text", query_text)]));
    sections.push(query_section);

    let prompt = IclPrompt {
        instruction_text: instruction_text.to_string(),
        demo_blocks,
        query_text: query_text.to_string(),
        template_version: template.version.clone(),
        body: sections.join(&template.separator),
    };
    log::debug!("assembled prompt of {} chars", prompt.len_chars());
    Ok(prompt)
}
