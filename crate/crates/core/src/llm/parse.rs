//! Tolerant parsing of executor output into an [`EntitySet`].
//!
//! Repairs are a fixed, ordered list. Parsing never fails: garbage yields an
//! empty set and a repair log saying why.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{EntityMention, EntitySet, LabelSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairStep {
    FenceStripped,
    ArrayExtracted,
    TrailingCommasRemoved,
    SingleQuotesReplaced,
    NoArrayFound,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub item: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedExtraction {
    pub entities: EntitySet,
    pub raw_text: String,
    pub repair_log: Vec<RepairStep>,
    pub dropped: Vec<DroppedItem>,
    /// Kept mentions whose span does not occur verbatim in the query text.
    pub ungrounded: Vec<EntityMention>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOptions<'a> {
    /// Query text for the grounding check; `None` skips it.
    pub query_text: Option<&'a str>,
    /// Drop ungrounded spans instead of keeping them.
    pub strict: bool,
}

impl<'a> ParseOptions<'a> {
    pub fn strict(query_text: &'a str) -> Self {
        ParseOptions {
            query_text: Some(query_text),
            strict: true,
        }
    }

    pub fn lenient(query_text: &'a str) -> Self {
        ParseOptions {
            query_text: Some(query_text),
            strict: false,
        }
    }
}

fn strip_fences(s: &str) -> Option<String> {
    let start = s.find("```")?;
    let after = &s[start + 3..];
    // drop the info string (e.g. `json`) on the opening fence line
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(body[..end].trim().to_string())
}

/// Byte range of the bracket-balanced region opened at `open`, honoring
/// JSON-ish string literals in either quote style.
fn balanced_end(s: &str, open: usize) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut depth = 0i32;
    let mut quote: Option<u8> = None;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == q {
                quote = None;
            }
            continue;
        }
        match b {
            b'"' => quote = Some(b),
            b'[' => depth += 1,
            b']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Prefers the first array that looks like a list of objects (or is empty),
/// falling back to the first balanced array at all.
fn find_array(s: &str) -> Option<&str> {
    let mut fallback = None;
    for (i, _) in s.match_indices('[') {
        let Some(end) = balanced_end(s, i) else { continue };
        let inner = s[i + 1..end].trim_start();
        if inner.starts_with('{') || inner.starts_with(']') {
            return Some(&s[i..end]);
        }
        fallback.get_or_insert(&s[i..end]);
    }
    fallback
}

fn remove_trailing_commas(s: &str) -> String {
    let re = regex::Regex::new(r",\s*([\]}])").expect("static regex");
    re.replace_all(s, "$1").into_owned()
}

fn as_array(s: &str) -> Option<Vec<Value>> {
    match serde_json::from_str::<Value>(s) {
        Ok(Value::Array(items)) => Some(items),
        _ => None,
    }
}

fn parse_array(candidate: &str, log: &mut Vec<RepairStep>) -> Option<Vec<Value>> {
    if let Some(v) = as_array(candidate) {
        return Some(v);
    }
    let mut text = candidate.to_string();
    let without_commas = remove_trailing_commas(&text);
    if without_commas != text {
        log.push(RepairStep::TrailingCommasRemoved);
        text = without_commas;
        if let Some(v) = as_array(&text) {
            return Some(v);
        }
    }
    if text.contains('\'') {
        log.push(RepairStep::SingleQuotesReplaced);
        text = text.replace('\'', "\"");
        if let Some(v) = as_array(&text) {
            return Some(v);
        }
    }
    None
}

fn is_grounded(span: &str, query: &str) -> bool {
    use unicode_normalization::UnicodeNormalization;
    query.contains(span) || {
        let q: String = query.nfc().collect();
        let s: String = span.nfc().collect();
        q.contains(&s)
    }
}

pub fn parse_entities(raw: &str, schema: &LabelSchema, opts: &ParseOptions<'_>) -> ParsedExtraction {
    let mut out = ParsedExtraction {
        raw_text: raw.to_string(),
        ..ParsedExtraction::default()
    };
    let mut text = raw.trim().to_string();
    if let Some(inner) = strip_fences(&text) {
        out.repair_log.push(RepairStep::FenceStripped);
        text = inner;
    }
    let candidate = match find_array(&text) {
        Some(a) => {
            if a.len() != text.len() {
                out.repair_log.push(RepairStep::ArrayExtracted);
            }
            a.to_string()
        }
        None => {
            out.repair_log.push(RepairStep::NoArrayFound);
            return out;
        }
    };
    let Some(items) = parse_array(&candidate, &mut out.repair_log) else {
        out.repair_log.push(RepairStep::Unparseable);
        return out;
    };

    for item in items {
        let drop = |reason: &str| DroppedItem {
            item: item.to_string(),
            reason: reason.to_string(),
        };
        let Value::Object(obj) = &item else {
            out.dropped.push(drop("not an object"));
            continue;
        };
        let (Some(Value::String(span)), Some(Value::String(ty))) = (obj.get("span"), obj.get("type")) else {
            out.dropped.push(drop("missing string span or type"));
            continue;
        };
        let span = span.trim();
        let ty = ty.trim();
        if span.is_empty() {
            out.dropped.push(drop("empty span"));
            continue;
        }
        if !schema.contains(ty) {
            out.dropped.push(drop(&format!("type {ty:?} not in schema")));
            continue;
        }
        let mention = EntityMention::new(span, ty);
        if let Some(q) = opts.query_text {
            if !is_grounded(span, q) {
                if opts.strict {
                    out.dropped.push(drop("span not found in query text"));
                    continue;
                }
                out.ungrounded.push(mention.clone());
            }
        }
        out.entities.insert(mention);
    }
    if !out.dropped.is_empty() {
        log::debug!("parse dropped {} item(s)", out.dropped.len());
    }
    out
}
