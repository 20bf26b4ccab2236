//! Three docs, two epochs, scripted agents. The executor's answer depends
//! only on the doc and the guideline revision it is shown:
//!
//! | doc | gold                          | wrong while   | wrong answer          |
//! |-----|-------------------------------|---------------|-----------------------|
//! | d1  | Emotet/Malware QakBot/Malware | never         |                       |
//! | d2  | APT28/ThreatActor Mimikatz/Tool | revision < 1 | Mimikatz missing (FN) |
//! | d3  | Turla/ThreatActor PsExec/Tool | revision < 2  | PsExec as Malware (CE) |
//!
//! Epoch 1: d1 correct at v0; d2 wrong at v0 -> g0001 -> v1; d3 wrong at
//! v1 -> g0002 -> v2. Epoch 2: everything correct at v2.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ttprompt::corpus::{AnnotatedDoc, EntityMention, EntitySet, LabelSchema};
use ttprompt::executor::Executor;
use ttprompt::fir::{run_fir_on, FirAgents, FirConfig, FirError, FirOutcome, HistoryRow, RowOutcome};
use ttprompt::instruction::{
    AnnotationGuideline, GuidelineSection, GuidingStrategy, InstructionSet, TaskInstruction,
};
use ttprompt::llm::{Agent, BackendError, ChatRequest, FnBackend, Gateway, ResponseCache, RetryPolicy};

pub fn schema() -> LabelSchema {
    LabelSchema::from_names("trace", &["ThreatActor", "Malware", "Tool"]).unwrap()
}

fn doc(id: &str, text: &str, gold: &[(&str, &str)]) -> AnnotatedDoc {
    let mut s = EntitySet::new();
    for (span, ty) in gold {
        s.insert(EntityMention::new(*span, *ty));
    }
    AnnotatedDoc::new(id, text, s)
}

pub fn docs() -> Vec<AnnotatedDoc> {
    vec![
        doc("d1", "Emotet dropped QakBot.", &[("Emotet", "Malware"), ("QakBot", "Malware")]),
        doc("d2", "APT28 used Mimikatz.", &[("APT28", "ThreatActor"), ("Mimikatz", "Tool")]),
        doc("d3", "Turla ran PsExec.", &[("Turla", "ThreatActor"), ("PsExec", "Tool")]),
    ]
}

pub fn initial_set() -> InstructionSet {
    let sections = schema()
        .type_names()
        .map(|t| GuidelineSection {
            entity_type: t.to_string(),
            definition_and_description: format!("Names of {t} entities."),
            notes_and_exceptions: "None.".into(),
        })
        .collect();
    InstructionSet::full(
        TaskInstruction::for_schema(&schema()),
        GuidingStrategy {
            id: "s1".into(),
            text: "Read each sentence and tag every named actor, malware and tool.".into(),
            origin_model_id: "strategist".into(),
            score: None,
            macro_score: None,
        },
        AnnotationGuideline::initial(sections),
    )
}

fn revision(req: &ChatRequest) -> u32 {
    let sys = &req.messages[0].content;
    sys.split("Guideline revision: v")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn executor_answer(doc_id: &str, rev: u32) -> String {
    let d = docs().into_iter().find(|d| d.id == doc_id).unwrap();
    let mut out: Vec<(String, String)> = d.gold.iter().map(|m| (m.span.clone(), m.entity_type.clone())).collect();
    if doc_id == "d2" && rev < 1 {
        out.retain(|(s, _)| s != "Mimikatz");
    }
    if doc_id == "d3" && rev < 2 {
        for m in out.iter_mut().filter(|(s, _)| s == "PsExec") {
            m.1 = "Malware".into();
        }
    }
    serde_json::to_string(
        &out.iter()
            .map(|(s, t)| serde_json::json!({"span": s, "type": t}))
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

fn gradient_answer(doc_id: &str) -> String {
    let (class, span) = match doc_id {
        "d2" => ("FN", "Mimikatz"),
        _ => ("CE", "PsExec"),
    };
    serde_json::json!({
        "error_class": class,
        "what": format!("{span} was not tagged as Tool"),
        "why": "the Tool section does not name credential or remote execution utilities",
        "where": {"entity_type": "Tool", "subsection": "notes_and_exceptions"},
        "how": {"rule": format!("Always tag \"{span}\" as Tool"), "rationale": "dual-use utility"}
    })
    .to_string()
}

fn editor_answer(gid: &str) -> String {
    match gid {
        "g0001" => "- Always tag \"Mimikatz\" as Tool".into(),
        _ => "- Always tag \"Mimikatz\" as Tool\n- Always tag \"PsExec\" as Tool".into(),
    }
}

/// Counts of backend calls per role.
#[derive(Default)]
pub struct Calls {
    pub execute: AtomicUsize,
    pub reflect: AtomicUsize,
    pub edit: AtomicUsize,
}

pub struct Fixture {
    pub agents: FirAgents,
    pub calls: Arc<Calls>,
    pub gateway: Arc<Gateway>,
}

/// Scripted agents; `live = false` serves only from the cache.
pub fn agents(cache_root: Option<&Path>, live: bool) -> Fixture {
    let calls = Arc::new(Calls::default());
    let c = calls.clone();
    let backend = FnBackend::new("trace", move |req: &ChatRequest| {
        if !live {
            return Err(BackendError::Fatal("cache miss".into()));
        }
        let tag = req.request_tag.clone();
        let (role, rest) = tag.split_once('/').unwrap_or((tag.as_str(), ""));
        let id = rest.split('/').next().unwrap_or("");
        match role {
            "execute" => {
                c.execute.fetch_add(1, Ordering::SeqCst);
                Ok(executor_answer(id, revision(req)))
            }
            "reflect" => {
                c.reflect.fetch_add(1, Ordering::SeqCst);
                Ok(gradient_answer(id))
            }
            "edit" => {
                c.edit.fetch_add(1, Ordering::SeqCst);
                Ok(editor_answer(id))
            }
            other => Err(BackendError::Fatal(format!("unexpected role {other}"))),
        }
    });
    let mut gw = Gateway::new(Arc::new(backend)).with_retry(RetryPolicy::no_delay());
    if let Some(root) = cache_root {
        gw = gw.with_cache(ResponseCache::on_disk(root));
    }
    let gateway = Arc::new(gw);
    Fixture {
        agents: FirAgents {
            executor: Executor::new(Agent::new(gateway.clone(), "executor"), schema()),
            reflector: Agent::new(gateway.clone(), "reflector"),
            editor: Agent::new(gateway.clone(), "editor"),
        },
        calls,
        gateway,
    }
}

pub fn config() -> FirConfig {
    FirConfig {
        epochs: 2,
        ..FirConfig::default()
    }
}

pub fn run(fx: &Fixture, run_dir: Option<&Path>) -> Result<FirOutcome, FirError> {
    let d = docs();
    run_fir_on(&d, &d, &initial_set(), &config(), &fx.agents, run_dir)
}

fn row(epoch: usize, doc: &str, l_err: u8, gid: Option<&str>, version: u32, outcome: RowOutcome) -> HistoryRow {
    HistoryRow {
        epoch,
        doc_id: doc.into(),
        l_err: Some(l_err),
        gradient_id: gid.map(str::to_string),
        guideline_version: version,
        outcome,
        note: None,
    }
}

/// The history the table above implies, row for row.
pub fn expected_history() -> Vec<HistoryRow> {
    vec![
        row(1, "d1", 0, None, 0, RowOutcome::Correct),
        row(1, "d2", 1, Some("g0001"), 0, RowOutcome::Applied),
        row(1, "d3", 1, Some("g0002"), 1, RowOutcome::Applied),
        row(2, "d1", 0, None, 2, RowOutcome::Correct),
        row(2, "d2", 0, None, 2, RowOutcome::Correct),
        row(2, "d3", 0, None, 2, RowOutcome::Correct),
    ]
}

/// Every consecutive pair of stored guideline versions differs in exactly
/// the subsection its gradient located. Returns the number of pairs checked.
pub fn check_section_isolation(run_dir: &Path, final_version: u32) -> Result<usize, String> {
    use ttprompt::fir::Gradient;
    use ttprompt::instruction::{load_guideline, Subsection};
    let mut checked = 0;
    for v in 1..=final_version {
        let before = load_guideline(run_dir, v - 1).map_err(|e| e.to_string())?;
        let after = load_guideline(run_dir, v).map_err(|e| e.to_string())?;
        let gid = &after.changelog.last().ok_or("no changelog entry")?.gradient_id;
        let raw = std::fs::read_to_string(run_dir.join("gradients").join(format!("{gid}.json"))).map_err(|e| e.to_string())?;
        let Gradient::Step(g) = serde_json::from_str::<Gradient>(&raw).map_err(|e| e.to_string())? else {
            return Err(format!("{gid} applied but stored as a no-op"));
        };
        for (a, b) in before.sections.iter().zip(&after.sections) {
            for sub in Subsection::ALL {
                let target = a.entity_type == g.locator.entity_type && sub == g.locator.subsection;
                if !target && a.get(sub) != b.get(sub) {
                    return Err(format!("v{v}: {} / {} changed outside {gid}'s target", a.entity_type, sub.as_str()));
                }
            }
        }
        checked += 1;
    }
    Ok(checked)
}
