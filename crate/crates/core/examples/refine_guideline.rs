//! One refinement run on the toy dataset with simulated agents. The run
//! directory keeps every guideline version, gradient and history row.
//!
//!     cargo run --example refine_guideline [-- RUN_DIR]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ttprompt::corpus::{load_dataset, DatasetFormat};
use ttprompt::executor::Executor;
use ttprompt::fir::{run_fir, FirAgents, FirConfig};
use ttprompt::instruction::{generate_guideline, GuidingStrategy, InstructionSet, TaskInstruction};
use ttprompt::llm::{Agent, Gateway, SimulatedAgents};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = load_dataset(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy"), DatasetFormat::Jsonl)?;
    let backend = SimulatedAgents::from_docs(bundle.schema.clone(), &bundle.train, 0.6, 0.15);
    let gateway = Arc::new(Gateway::new(Arc::new(backend)));
    let agent = |model: &str| Agent::new(gateway.clone(), model);

    let initial = InstructionSet::full(
        TaskInstruction::for_schema(&bundle.schema),
        GuidingStrategy {
            id: "s01".into(),
            text: "Compare each candidate span with the type definitions before assigning a type.".into(),
            origin_model_id: "hand".into(),
            score: None,
            macro_score: None,
        },
        generate_guideline(&bundle.schema, &agent("writer"))?,
    );
    let agents = FirAgents {
        executor: Executor::new(agent("executor"), bundle.schema.clone()),
        reflector: agent("reflector"),
        editor: agent("editor"),
    };
    let config = FirConfig {
        epochs: 3,
        subset_fraction: 0.5,
        seed: 7,
        ..FirConfig::default()
    };

    let tmp = tempfile::tempdir()?;
    let run_dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&run_dir)?;
    let outcome = run_fir(&bundle, &initial, &config, &agents, Some(&run_dir))?;

    for row in &outcome.state.history {
        println!(
            "epoch {} {:<5} l_err {:?} v{} {:?} {}",
            row.epoch,
            row.doc_id,
            row.l_err,
            row.guideline_version,
            row.outcome,
            row.gradient_id.as_deref().unwrap_or("")
        );
    }
    for v in &outcome.state.validation {
        println!("validation epoch {} v{}: micro {:.3}", v.epoch, v.guideline_version, v.micro_f1);
    }
    println!(
        "selected epoch {:?}, final guideline v{}, artifacts in {}",
        outcome.selected_epoch,
        outcome.final_guideline.version,
        run_dir.display()
    );
    Ok(())
}
