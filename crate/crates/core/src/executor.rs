//! Running the executor LLM over documents: prompt assembly, the gateway
//! call, and parsing the answer into an entity set.

use std::collections::BTreeMap;

use crate::corpus::{AnnotatedDoc, EntitySet, LabelSchema};
use crate::llm::{parse_entities, Agent, ChatMessage, GatewayError, ParseOptions, ParsedExtraction};
use crate::prompts::tags;
use crate::retrieval::{assemble_prompt, DemoSet, Paradigm, PromptTemplate, TemplateError};

#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl ExecutorError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, ExecutorError::Gateway(g) if g.is_fatal())
    }
}

#[derive(Clone)]
pub struct Executor {
    pub agent: Agent,
    pub schema: LabelSchema,
    pub template: PromptTemplate,
    /// Drop spans that do not occur in the query text.
    pub strict: bool,
}

impl Executor {
    pub fn new(agent: Agent, schema: LabelSchema) -> Self {
        Executor {
            agent,
            schema,
            template: PromptTemplate::default(),
            strict: true,
        }
    }

    fn messages(&self, instruction: &str, demos: &DemoSet, text: &str) -> Result<Vec<ChatMessage>, TemplateError> {
        let prompt = assemble_prompt(instruction, demos, text, &self.template)?;
        Ok(vec![ChatMessage::system(prompt.instruction_text), ChatMessage::user(prompt.body)])
    }

    fn parse(&self, raw: &str, text: &str) -> ParsedExtraction {
        let opts = ParseOptions {
            query_text: Some(text),
            strict: self.strict,
        };
        parse_entities(raw, &self.schema, &opts)
    }

    pub fn extract(
        &self,
        instruction: &str,
        demos: &DemoSet,
        doc: &AnnotatedDoc,
    ) -> Result<ParsedExtraction, ExecutorError> {
        let messages = self.messages(instruction, demos, &doc.text)?;
        let raw = self.agent.chat(messages, format!("{}/{}", tags::EXECUTE, doc.id))?;
        Ok(self.parse(&raw, &doc.text))
    }

    /// Zero-shot extraction over many documents, concurrently under the
    /// gateway bound. Any fatal gateway error is returned; other per-doc
    /// failures become empty predictions.
    pub fn predict_all(
        &self,
        instruction: &str,
        docs: &[AnnotatedDoc],
    ) -> Result<BTreeMap<String, EntitySet>, ExecutorError> {
        let empty = DemoSet::empty(Paradigm::SemanticKnn);
        let demos: Vec<&DemoSet> = docs.iter().map(|_| &empty).collect();
        self.predict_with_demos(instruction, docs, &demos)
    }

    pub fn predict_with_demos(
        &self,
        instruction: &str,
        docs: &[AnnotatedDoc],
        demos: &[&DemoSet],
    ) -> Result<BTreeMap<String, EntitySet>, ExecutorError> {
        assert_eq!(docs.len(), demos.len(), "one demo set per document");
        let requests = docs
            .iter()
            .zip(demos)
            .map(|(d, ds)| {
                Ok(self
                    .agent
                    .request(self.messages(instruction, ds, &d.text)?, format!("{}/{}", tags::EXECUTE, d.id)))
            })
            .collect::<Result<Vec<_>, TemplateError>>()?;
        let replies = self.agent.gateway().complete_many(&requests);
        let mut out = BTreeMap::new();
        for (doc, reply) in docs.iter().zip(replies) {
            let set = match reply {
                Ok(raw) => self.parse(&raw, &doc.text).entities,
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(e) => {
                    log::warn!("executor failed on {}: {e}", doc.id);
                    EntitySet::new()
                }
            };
            out.insert(doc.id.clone(), set);
        }
        Ok(out)
    }
}
