//! Strategy search and guideline generation with the simulated agents,
//! then the prompt text of every ablation variant.
//!
//!     cargo run --example instruction_search

use std::path::Path;
use std::sync::Arc;

use ttprompt::corpus::{load_dataset, stratified_subsample, DatasetFormat, Rounding};
use ttprompt::executor::Executor;
use ttprompt::instruction::{
    generate_guideline, generate_strategies, render_instruction_set, select_strategy, InstructionSet,
    TaskInstruction, Variant,
};
use ttprompt::llm::{AgentSet, Gateway, ModelRoles, SimulatedAgents};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = load_dataset(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy"), DatasetFormat::Jsonl)?;
    let backend = SimulatedAgents::from_docs(bundle.schema.clone(), &bundle.train, 0.6, 0.15);
    let gateway = Arc::new(Gateway::new(Arc::new(backend)));
    let agents = AgentSet::new(gateway.clone(), &ModelRoles::default());
    let executor = Executor::new(agents.executor.clone(), bundle.schema.clone());

    let tactic = TaskInstruction::for_schema(&bundle.schema);
    let d_sub = stratified_subsample(&bundle.train, 0.5, 7, Rounding::Ceil)?;
    let strategies = generate_strategies(4, &bundle.schema, &agents.strategist)?;
    let selection = select_strategy(strategies, &d_sub, &tactic, &executor)?;
    for s in &selection.strategies {
        println!("{} {:.3} {}", s.id, s.score.unwrap_or(0.0), s.text);
    }
    println!("selected {}", selection.best().id);

    let guideline = generate_guideline(&bundle.schema, &agents.guideline_writer)?;
    let set = InstructionSet::full(tactic, selection.best().clone(), guideline);
    for v in Variant::ALL {
        let text = render_instruction_set(&set, v)?;
        println!("\n== {v} ({} chars)\n{}", text.len(), text.lines().take(6).collect::<Vec<_>>().join("\n"));
    }
    println!("\n{:?}", gateway.stats());
    Ok(())
}
