use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatRequest};

/// Selects requests by model id, tag prefix and required substrings.
/// A `"*"` entry in `contains` matches anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Matcher {
    pub model: Option<String>,
    pub tag_prefix: Option<String>,
    pub contains: Vec<String>,
}

impl Matcher {
    pub fn any() -> Self {
        Matcher {
            contains: vec!["*".into()],
            ..Self::default()
        }
    }

    pub fn contains(needle: impl Into<String>) -> Self {
        Matcher {
            contains: vec![needle.into()],
            ..Self::default()
        }
    }

    pub fn tag(prefix: impl Into<String>) -> Self {
        Matcher {
            tag_prefix: Some(prefix.into()),
            ..Self::default()
        }
    }

    pub fn matches(&self, request: &ChatRequest) -> bool {
        if self.model.as_ref().is_some_and(|m| m != &request.model) {
            return false;
        }
        if self
            .tag_prefix
            .as_ref()
            .is_some_and(|p| !request.request_tag.starts_with(p.as_str()))
        {
            return false;
        }
        let content = request.content();
        self.contains
            .iter()
            .all(|needle| needle == "*" || content.contains(needle.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Transient,
    Auth,
}

/// A canned reply: response text, or an injected failure written as
/// `{"error": "transient"}` / `{"error": "auth"}` in script files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Failure { error: MockFailure },
}

#[allow(non_upper_case_globals)]
impl MockReply {
    pub const Transient: MockReply = MockReply::Failure {
        error: MockFailure::Transient,
    };
    pub const AuthFailure: MockReply = MockReply::Failure {
        error: MockFailure::Auth,
    };

    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }
}

/// Replies are served in order on successive matches; the last one repeats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub replies: Vec<MockReply>,
}

/// Ordered rules; the first matching rule answers, else `default`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: Option<String>,
}

impl MockScript {
    pub fn constant(reply: impl Into<String>) -> Self {
        MockScript {
            rules: vec![MockRule {
                matcher: Matcher::any(),
                replies: vec![MockReply::Text(reply.into())],
            }],
            default: None,
        }
    }

    pub fn rule(mut self, matcher: Matcher, replies: Vec<MockReply>) -> Self {
        self.rules.push(MockRule { matcher, replies });
        self
    }

    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default = Some(reply.into());
        self
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
    }
}

pub struct ScriptedBackend {
    script: MockScript,
    cursors: Mutex<Vec<usize>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(script: MockScript) -> Self {
        let n = script.rules.len();
        ScriptedBackend {
            script,
            cursors: Mutex::new(vec![0; n]),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Number of requests that reached this backend.
    pub fn calls(&self) -> usize {
        self.log.lock().expect("log lock").len()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn calls_tagged(&self, prefix: &str) -> usize {
        self.log
            .lock()
            .expect("log lock")
            .iter()
            .filter(|r| r.request_tag.starts_with(prefix))
            .count()
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted-mock"
    }

    fn send(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.log.lock().expect("log lock").push(request.clone());
        let hit = self
            .script
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.matcher.matches(request));
        let reply = match hit {
            Some((i, rule)) => {
                let mut cursors = self.cursors.lock().expect("cursor lock");
                let idx = cursors[i].min(rule.replies.len().saturating_sub(1));
                cursors[i] += 1;
                rule.replies.get(idx).cloned()
            }
            None => None,
        };
        match reply.or_else(|| self.script.default.clone().map(MockReply::Text)) {
            Some(MockReply::Text(t)) => Ok(t),
            Some(MockReply::Failure {
                error: MockFailure::Transient,
            }) => Err(BackendError::Transient("scripted transient failure".into())),
            Some(MockReply::Failure {
                error: MockFailure::Auth,
            }) => Err(BackendError::Auth("scripted auth failure".into())),
            None => Err(BackendError::Fatal(format!(
                "no mock rule matches request tagged {:?}",
                request.request_tag
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn req(tag: &str, text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::user(text)]).with_tag(tag)
    }

    #[test]
    fn first_matching_rule_wins_and_last_reply_repeats() {
        let b = ScriptedBackend::new(
            MockScript::default()
                .rule(Matcher::contains("alpha"), vec![MockReply::text("1"), MockReply::text("2")])
                .rule(Matcher::any(), vec![MockReply::text("any")]),
        );
        assert_eq!(b.send(&req("", "alpha")).unwrap(), "1");
        assert_eq!(b.send(&req("", "beta")).unwrap(), "any");
        assert_eq!(b.send(&req("", "alpha")).unwrap(), "2");
        assert_eq!(b.send(&req("", "alpha")).unwrap(), "2");
    }

    #[test]
    fn unmatched_requests_use_default_or_fail() {
        let b = ScriptedBackend::new(MockScript::default().rule(Matcher::tag("x"), vec![MockReply::text("x")]));
        assert!(matches!(b.send(&req("y", "")), Err(BackendError::Fatal(_))));
        let b = ScriptedBackend::new(MockScript::default().with_default("d"));
        assert_eq!(b.send(&req("y", "")).unwrap(), "d");
    }

    #[test]
    fn scripts_load_from_json() {
        let raw = r#"{"rules":[{"match":{"contains":["*"]},"replies":[{"error":"transient"},"[]"]}],"default":null}"#;
        let script: MockScript = serde_json::from_str(raw).unwrap();
        assert_eq!(script.rules[0].replies, vec![MockReply::Transient, MockReply::text("[]")]);
        let back: MockScript = serde_json::from_str(&serde_json::to_string(&script).unwrap()).unwrap();
        assert_eq!(back, script);
    }
}
