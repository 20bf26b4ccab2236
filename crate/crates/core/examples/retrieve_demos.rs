//! Build an embedded pool from the toy train split, retrieve demonstrations
//! with each paradigm and render the semantic prompt.
//!
//!     cargo run --example retrieve_demos

use std::path::Path;

use ttprompt::corpus::{load_dataset, DatasetFormat};
use ttprompt::retrieval::{
    assemble_prompt, build_pool, retrieve_entity_density, retrieve_semantic_knn, retrieve_type_overlap,
    HashingEmbedder, OracleAck, PromptTemplate,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bundle = load_dataset(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy"), DatasetFormat::Jsonl)?;
    let embedder = HashingEmbedder::new(256);
    let pool = build_pool(&bundle.train, &embedder, 4)?;
    let query = &bundle.test[0];

    let semantic = retrieve_semantic_knn(&pool, &query.text, 3, &embedder, None)?;
    let overlap = retrieve_type_overlap(&pool, &query.gold, 3, None, OracleAck::acknowledge_gold_label_use())?;
    let density = retrieve_entity_density(&pool, 3, None)?;
    for set in [&semantic, &overlap, &density] {
        let scored: Vec<String> = set.prompt_order().iter().map(|d| format!("{}={:.3}", d.doc.id, d.score)).collect();
        println!("{:<15} {}", set.paradigm.as_str(), scored.join(" "));
    }

    let prompt = assemble_prompt("Extract the entities.", &semantic, &query.text, &PromptTemplate::default())?;
    println!("\n{}", prompt.render());
    Ok(())
}
