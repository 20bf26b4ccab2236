mod common;

use std::sync::atomic::Ordering;
use std::sync::Arc;

use common::fir;
use ttprompt::cli::diff_run_dirs;
use ttprompt::executor::Executor;
use ttprompt::fir::{run_fir_on, FirAgents};
use ttprompt::llm::{Agent, ChatRequest, FnBackend, Gateway, MockScript, ScriptedBackend};

#[test]
fn all_correct_executor_yields_no_gradients() {
    let gold_exec = FnBackend::new("gold", |req: &ChatRequest| {
        let tag = req.request_tag.clone();
        let id = tag.rsplit('/').next().unwrap().to_string();
        let d = fir::docs().into_iter().find(|d| d.id == id).unwrap();
        Ok(d.gold.to_json())
    });
    let exec = Agent::new(Arc::new(Gateway::new(Arc::new(gold_exec))), "executor");
    let refl = Arc::new(ScriptedBackend::new(MockScript::constant("{}")));
    let agents = FirAgents {
        executor: Executor::new(exec, fir::schema()),
        reflector: Agent::new(Arc::new(Gateway::new(refl.clone())), "reflector"),
        editor: Agent::new(Arc::new(Gateway::new(refl.clone())), "editor"),
    };
    let dir = tempfile::tempdir().unwrap();
    let d = fir::docs();
    let out = run_fir_on(&d, &d, &fir::initial_set(), &fir::config(), &agents, Some(dir.path())).unwrap();
    assert_eq!(out.final_guideline.version, 0);
    assert_eq!(out.state.applied(), 0);
    assert_eq!(refl.calls(), 0);
    assert_eq!(std::fs::read_dir(dir.path().join("gradients")).unwrap().count(), 0);
}

#[test]
fn hand_traced_run_matches_row_for_row() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fir::agents(None, true);
    let out = fir::run(&fx, Some(dir.path())).unwrap();
    assert_eq!(out.state.history, fir::expected_history());
    assert_eq!(out.state.applied(), 2);
    assert_eq!(out.final_guideline.version, 2);
    // v2 is already in place when epoch 1 is validated; the earliest best epoch wins
    assert_eq!(out.selected_epoch, Some(1));
    assert_eq!(fx.calls.reflect.load(Ordering::SeqCst), 2);
    assert_eq!(fx.calls.edit.load(Ordering::SeqCst), 2);
    assert_eq!(std::fs::read_dir(dir.path().join("gradients")).unwrap().count(), 2);
    let history: Vec<ttprompt::fir::HistoryRow> = std::fs::read_to_string(dir.path().join("history.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(history, fir::expected_history());
    let notes = out.final_guideline.subsection("Tool", ttprompt::instruction::Subsection::NotesAndExceptions).unwrap();
    assert!(notes.contains("PsExec") && notes.contains("Mimikatz"));
    assert_eq!(out.state.validation.last().unwrap().micro_f1, 1.0);
}

#[test]
fn applies_never_touch_other_sections() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fir::agents(None, true);
    let out = fir::run(&fx, Some(dir.path())).unwrap();
    assert_eq!(fir::check_section_isolation(dir.path(), out.final_guideline.version), Ok(2));
}

#[test]
fn replay_from_cache_is_byte_identical() {
    let cache = tempfile::tempdir().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let live = fir::agents(Some(cache.path()), true);
    fir::run(&live, Some(a.path())).unwrap();
    let replay = fir::agents(Some(cache.path()), false);
    fir::run(&replay, Some(b.path())).unwrap();
    assert_eq!(replay.gateway.stats().backend_calls, 0);
    assert!(diff_run_dirs(a.path(), b.path()).unwrap().is_empty());
}

#[test]
fn cache_misses_surface_as_forward_failures() {
    let cache = tempfile::tempdir().unwrap();
    let fx = fir::agents(Some(cache.path()), false);
    let out = fir::run(&fx, None).unwrap();
    assert!(out
        .state
        .history
        .iter()
        .all(|r| r.outcome == ttprompt::fir::RowOutcome::ForwardFailed && r.l_err.is_none()));
    assert_eq!(out.final_guideline.version, 0);
}
