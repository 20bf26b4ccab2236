//! Raw difficulty dimensions of the toy dataset, and Ω over the published
//! normalized rows shipped in data/reference.
//!
//!     cargo run --example difficulty_index

use std::path::Path;

use ttprompt::corpus::{load_dataset, DatasetFormat};
use ttprompt::difficulty::{
    compute_raw_dimensions, normalize_and_aggregate, render_table, DifficultyProfile, Dimensions, EQUAL_WEIGHTS,
};
use ttprompt::retrieval::HashingEmbedder;

#[derive(serde::Deserialize)]
struct Row {
    dataset: String,
    values: [f64; 6],
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let bundle = load_dataset(&data.join("toy"), DatasetFormat::Jsonl)?;
    let toy = compute_raw_dimensions(&bundle, &HashingEmbedder::new(256))?;
    println!("toy raw: {:?}", toy.raw);
    println!("toy C_type: {:?}, tokenization {:?}\n", toy.c_type_status, toy.tokenization);

    let rows: Vec<Row> = serde_json::from_str(&std::fs::read_to_string(data.join("reference/difficulty_rows.json"))?)?;
    let profiles: Vec<DifficultyProfile> = rows
        .into_iter()
        .map(|r| DifficultyProfile::from_raw(r.dataset, Dimensions::from_array(r.values)))
        .collect();
    let scored = normalize_and_aggregate(&profiles, EQUAL_WEIGHTS)?;
    print!("{}", render_table(&scored));
    Ok(())
}
