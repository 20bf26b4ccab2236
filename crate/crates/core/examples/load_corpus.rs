//! Load the bundled toy dataset, deduplicate it and draw a stratified sample.
//!
//!     cargo run --example load_corpus

use std::path::Path;

use ttprompt::corpus::{dedup_by_text, load_dataset, stratified_subsample, DatasetFormat, Rounding};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy");
    let bundle = load_dataset(&dir, DatasetFormat::Jsonl)?;
    let (train, dev, test) = bundle.split_sizes();
    println!("{}: train {train}, dev {dev:?}, test {test}", bundle.name);
    println!("types: {}", bundle.schema.type_names().collect::<Vec<_>>().join(", "));

    let (kept, removed) = dedup_by_text(bundle.train.clone());
    println!("dedup kept {} docs, removed {removed:?}", kept.len());

    let sample = stratified_subsample(&bundle.train, 0.5, 7, Rounding::Ceil)?;
    for doc in &sample {
        println!("  {} {}", doc.id, doc.gold.to_json());
    }
    Ok(())
}
