//! A deterministic stand-in for every agent role, so the full pipeline
//! (strategy search, guideline generation, refinement, evaluation) runs
//! offline with behaviour that actually responds to the prompts.
//!
//! The executor tags lexicon surfaces found in the query. Its lexicon is a
//! deliberately incomplete and partly mislabelled view of the training data,
//! extended by demonstrations in the prompt and by guideline rules of the
//! form `Always tag "X" as T.` / `Never tag "X" as T.`. The reflector and
//! editor emit exactly such rules, so refinement has something to learn.

use std::collections::BTreeMap;

use regex::Regex;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, ChatRequest, ChatRole};
use crate::corpus::{AnnotatedDoc, EntityMention, EntitySet, LabelSchema};
use crate::prompts::{self, tags};

/// Strategy text that switches the simulated executor to case-insensitive matching.
pub const CASE_HINT: &str = "regardless of letter case";

const STRATEGY_POOL: &[&str] = &[
    "Read the whole report first, then extract entities sentence by sentence.",
    "Focus on proper nouns and product names, ignoring generic descriptions.",
    "Match every known name regardless of letter case, since reports often lowercase tool and malware names.",
    "Identify the attack narrative first, then tag the actors, tools and targets it mentions.",
    "Prefer the longest complete name when several candidate spans overlap.",
    "Treat indicators such as hashes, domains and file names as strong anchors for nearby entities.",
    "Tag each entity only where it is explicitly named, not where it is referred to by a pronoun.",
    "Compare each candidate span with the type definitions before assigning a type.",
    "List candidate spans first, then discard those that do not fit any type.",
    "Pay special attention to entity types that are easily confused with each other.",
    "Extract conservatively: only output spans you are confident about.",
    "Use the surrounding verbs to decide whether a name is malware, a tool or an actor.",
];

fn unit_hash(salt: &str, s: &str) -> f64 {
    let d = Sha256::digest(format!("{salt}\u{0}{s}").as_bytes());
    let v = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    v as f64 / u64::MAX as f64
}

pub struct SimulatedAgents {
    schema: LabelSchema,
    lexicon: BTreeMap<String, String>,
    always: Regex,
    never: Regex,
    guideline_type: Regex,
    exact_n: Regex,
    over_cap: Regex,
}

impl SimulatedAgents {
    pub fn new(schema: LabelSchema) -> Self {
        SimulatedAgents {
            schema,
            lexicon: BTreeMap::new(),
            always: Regex::new(r#"Always tag "([^"]+)" as ([^\s.,;"]+)"#).expect("static regex"),
            never: Regex::new(r#"Never tag "([^"]+)" as ([^\s.,;"]+)"#).expect("static regex"),
            guideline_type: Regex::new(r#"entity type "([^"]+)""#).expect("static regex"),
            exact_n: Regex::new(r"Propose exactly (\d+)").expect("static regex"),
            over_cap: Regex::new(r"over the (\d+)-character limit").expect("static regex"),
        }
    }

    pub fn with_lexicon<I, S, T>(mut self, entries: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        for (s, t) in entries {
            self.lexicon.insert(s.into(), t.into());
        }
        self
    }

    /// Lexicon drawn from gold mentions: each surface is kept with
    /// probability `recall`, mislabelled with probability `confusion`, and
    /// lowercased about a third of the time. All draws hash the surface, so
    /// the result is a pure function of the inputs.
    pub fn from_docs(schema: LabelSchema, docs: &[AnnotatedDoc], recall: f64, confusion: f64) -> Self {
        let types: Vec<String> = schema.type_names().map(str::to_string).collect();
        let mut entries = BTreeMap::new();
        for m in docs.iter().flat_map(|d| d.gold.iter()) {
            if unit_hash("keep", &m.span) >= recall {
                continue;
            }
            let mut ty = m.entity_type.clone();
            if types.len() > 1 && unit_hash("confuse", &m.span) < confusion {
                let pos = types.iter().position(|t| *t == ty).unwrap_or(0);
                ty = types[(pos + 1) % types.len()].clone();
            }
            let surface = if unit_hash("case", &m.span) < 0.33 {
                m.span.to_lowercase()
            } else {
                m.span.clone()
            };
            entries.entry(surface).or_insert(ty);
        }
        let mut sim = Self::new(schema);
        sim.lexicon = entries;
        sim
    }

    pub fn lexicon_len(&self) -> usize {
        self.lexicon.len()
    }

    fn execute(&self, req: &ChatRequest) -> String {
        let content = req.content();
        let user = req.last_user().unwrap_or("");
        let query = match user.rfind("Text: ") {
            Some(i) => user[i + 6..].trim_end().trim_end_matches("Entities:").trim_end(),
            None => user,
        };

        let mut lexicon = self.lexicon.clone();
        for line in user.lines() {
            if let Some(rest) = line.strip_prefix("Entities: ") {
                if let Ok(demo) = serde_json::from_str::<EntitySet>(rest) {
                    for m in demo.iter() {
                        lexicon.insert(m.span.clone(), m.entity_type.clone());
                    }
                }
            }
        }
        for c in self.always.captures_iter(&content) {
            lexicon.insert(c[1].to_string(), c[2].to_string());
        }
        for c in self.never.captures_iter(&content) {
            if lexicon.get(&c[1]).is_some_and(|t| *t == c[2]) {
                lexicon.remove(&c[1]);
            }
        }
        let fold = content.contains(CASE_HINT);

        let mut surfaces: Vec<(&String, &String)> = lexicon
            .iter()
            .filter(|(s, t)| !s.is_empty() && self.schema.contains(t))
            .collect();
        surfaces.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)));

        let haystack = if fold { query.to_ascii_lowercase() } else { query.to_string() };
        let mut claimed: Vec<(usize, usize)> = Vec::new();
        let mut found = EntitySet::new();
        for (surface, ty) in surfaces {
            let needle = if fold { surface.to_ascii_lowercase() } else { surface.clone() };
            for (start, _) in haystack.match_indices(needle.as_str()) {
                let end = start + needle.len();
                let boundary_before = query[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
                let boundary_after = query[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
                if !boundary_before || !boundary_after {
                    continue;
                }
                if claimed.iter().any(|&(s, e)| start < e && s < end) {
                    continue;
                }
                claimed.push((start, end));
                found.insert(EntityMention::new(&query[start..end], ty.clone()));
            }
        }
        found.to_json()
    }

    fn strategies(&self, req: &ChatRequest) -> String {
        let user = req.last_user().unwrap_or("");
        let n: usize = self
            .exact_n
            .captures(user)
            .and_then(|c| c[1].parse().ok())
            .unwrap_or(STRATEGY_POOL.len());
        let offset = req
            .messages
            .iter()
            .filter(|m| m.role == ChatRole::User)
            .rev()
            .find_map(|m| Regex::new(r"numbered from (\d+)").ok()?.captures(&m.content).and_then(|c| c[1].parse::<usize>().ok()))
            .map(|k| k - 1)
            .unwrap_or(0);
        (0..n)
            .map(|i| format!("{}. {}", offset + i + 1, STRATEGY_POOL[(offset + i) % STRATEGY_POOL.len()]))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn guideline(&self, req: &ChatRequest) -> String {
        let content = req.content();
        let ty = self
            .guideline_type
            .captures(&content)
            .map(|c| c[1].to_string())
            .unwrap_or_else(|| "entity".into());
        let desc = self
            .schema
            .description(&ty)
            .map(|d| format!(" ({})", d.trim_end_matches('.')))
            .unwrap_or_default();
        format!(
            "## {}\nA {ty} span covers the complete name of the {ty}{desc} exactly as written in the \
             text. Exclude surrounding articles, quotes and punctuation.\n## {}\nWhen a name could \
             also be read as another entity type, label it by the role it plays in the sentence.",
            prompts::DEFINITION_HEADING,
            prompts::NOTES_HEADING
        )
    }

    fn marked_set(content: &str, marker: &str) -> EntitySet {
        content
            .lines()
            .find_map(|l| l.strip_prefix(marker))
            .and_then(|rest| serde_json::from_str(rest.trim()).ok())
            .unwrap_or_default()
    }

    fn reflect(&self, req: &ChatRequest) -> String {
        let content = req.last_user().unwrap_or("");
        let gold = Self::marked_set(content, prompts::GOLD_MARKER);
        let predicted = Self::marked_set(content, prompts::PREDICTED_MARKER);
        let missed = gold.difference(&predicted).next();
        let spurious = predicted.difference(&gold).next();
        let (class, mention, rule, what) = match (missed, spurious) {
            (Some(m), _) => {
                let class = if predicted.iter().any(|p| p.span == m.span) {
                    "CE"
                } else if predicted
                    .iter()
                    .any(|p| p.entity_type == m.entity_type && (p.span.contains(&m.span) || m.span.contains(&p.span)))
                {
                    "BE"
                } else {
                    "FN"
                };
                (
                    class,
                    m,
                    format!("Always tag \"{}\" as {}.", m.span, m.entity_type),
                    format!("The {} mention \"{}\" was not extracted correctly.", m.entity_type, m.span),
                )
            }
            (None, Some(p)) => (
                "FP",
                p,
                format!("Never tag \"{}\" as {}.", p.span, p.entity_type),
                format!("\"{}\" was extracted as {} but is not one.", p.span, p.entity_type),
            ),
            (None, None) => {
                return "No error found.".into();
            }
        };
        json!({
            "error_class": class,
            "what": what,
            "why": format!("No rule in the {} section covers \"{}\".", mention.entity_type, mention.span),
            "where": {"entity_type": mention.entity_type, "subsection": "notes_and_exceptions"},
            "how": {"rule": rule, "rationale": "An explicit rule removes the ambiguity for this surface form."}
        })
        .to_string()
    }

    fn between_markers(s: &str) -> Option<&str> {
        let open = format!("{}\n", prompts::SECTION_OPEN);
        let close = format!("\n{}", prompts::SECTION_CLOSE);
        let start = s.find(&open)? + open.len();
        let end = s[start..].find(&close)? + start;
        Some(&s[start..end])
    }

    fn edit(&self, req: &ChatRequest) -> String {
        let user = req.last_user().unwrap_or("");
        if let Some(c) = self.over_cap.captures(user) {
            let cap: usize = c[1].parse().unwrap_or(usize::MAX);
            let text = Self::between_markers(user).unwrap_or("");
            let mut lines: Vec<&str> = text.lines().collect();
            while lines.join("\n").chars().count() > cap && !lines.is_empty() {
                let victim = lines
                    .iter()
                    .position(|l| !l.starts_with("Always tag") && !l.starts_with("Never tag"))
                    .unwrap_or(0);
                lines.remove(victim);
            }
            return lines.join("\n");
        }
        let current = Self::between_markers(user).unwrap_or("").trim_end();
        let rule = user
            .lines()
            .find_map(|l| l.strip_prefix(prompts::RULE_MARKER))
            .unwrap_or("")
            .trim();
        if rule.is_empty() || current.contains(rule) {
            return current.to_string();
        }
        if current.is_empty() {
            rule.to_string()
        } else {
            format!("{current}\n{rule}")
        }
    }
}

impl Backend for SimulatedAgents {
    fn name(&self) -> &str {
        "simulated"
    }

    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let tag = req.request_tag.as_str();
        let reply = if tag.starts_with(tags::EXECUTE) {
            self.execute(req)
        } else if tag.starts_with(tags::STRATEGIES) {
            self.strategies(req)
        } else if tag.starts_with(tags::GUIDELINE) {
            self.guideline(req)
        } else if tag.starts_with(tags::REFLECT) {
            self.reflect(req)
        } else if tag.starts_with(tags::EDIT) {
            self.edit(req)
        } else {
            return Err(BackendError::Fatal(format!("simulated agents cannot serve tag {tag:?}")));
        };
        Ok(reply)
    }
}
