//! Correlates the F1 gain of a method over its fine-tuned baseline with Ω.
//!
//!     cargo run --example correlate_gains [-- METHOD]

use std::collections::BTreeMap;
use std::path::Path;

use ttprompt::cli::default_baselines;
use ttprompt::metrics::{gain_correlation, F1Pair};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let method = std::env::args().nth(1).unwrap_or_else(|| "TTPrompt".into());
    let refdir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/reference");
    let results: BTreeMap<String, BTreeMap<String, F1Pair>> =
        serde_json::from_str(&std::fs::read_to_string(refdir.join("f1_results.json"))?)?;
    let omega: BTreeMap<String, f64> = serde_json::from_str(&std::fs::read_to_string(refdir.join("omega_printed.json"))?)?;
    let omega: Vec<(String, f64)> = omega.into_iter().collect();

    let corr = gain_correlation(&results, &omega, &method, &default_baselines())?;
    print!("{}", corr.scatter_csv());
    println!("macro: r = {:.3}, p = {:.4} (n = {})", corr.macro_corr.r, corr.macro_corr.p, corr.macro_corr.n);
    println!("micro: r = {:.3}, p = {:.4} (n = {})", corr.micro_corr.r, corr.micro_corr.p, corr.micro_corr.n);
    Ok(())
}
