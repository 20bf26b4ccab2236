//! Runbook for the live reference run against an OpenAI-compatible endpoint.
//!
//! This is the one check that is not part of CI: it spends real tokens.
//!
//!     export LLM_API_BASE=https://your-endpoint/v1
//!     export LLM_API_KEY=...
//!     export TTPROMPT_LIVE_BUNDLE=/path/to/ingested/bundle   # defaults to the toy data
//!     cargo run --release --example live_reference_run [-- OUT_DIR]
//!
//! Steps: ingest (when pointed at raw data), strategize, refine, evaluate all
//! variants, then replay the evaluation from the response cache to confirm
//! the run is reproducible offline. The same three model steps are what the
//! acceptance runner executes when both variables are set.

use std::path::{Path, PathBuf};

use ttprompt::cli::{run_from_args, EXIT_OK};

fn step(args: &[&str]) -> Result<(), String> {
    println!("\n$ ttprompt {}", args.join(" "));
    let mut argv = vec!["ttprompt"];
    argv.extend_from_slice(args);
    match run_from_args(argv) {
        EXIT_OK => Ok(()),
        code => Err(format!("`{}` exited with {code}", args[0])),
    }
}

fn main() {
    let Ok(base) = std::env::var("LLM_API_BASE") else {
        eprintln!("LLM_API_BASE is not set; nothing to do. See the header of this file.");
        std::process::exit(2);
    };
    if std::env::var("LLM_API_KEY").is_err() {
        eprintln!("warning: LLM_API_KEY is not set, requests go out unauthenticated");
    }
    println!("endpoint: {base}");

    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("live-run"));
    let out = out.to_string_lossy().into_owned();
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy");
    let bundle = std::env::var("TTPROMPT_LIVE_BUNDLE").unwrap_or_else(|_| format!("{out}/bundle"));
    let d = |name: &str| format!("{out}/{name}");

    let result = (|| {
        if std::env::var("TTPROMPT_LIVE_BUNDLE").is_err() {
            step(&["ingest", "--input", &toy.to_string_lossy(), "--out", &bundle, "--dedup"])?;
        }
        let remote = ["--backend", "remote"];
        step(&[&["strategize", "--bundle", &bundle, "--out", &d("s")][..], &remote].concat())?;
        step(&[&["refine", "--bundle", &bundle, "--from", &d("s"), "--out", &d("r")][..], &remote].concat())?;
        step(&[&["evaluate", "--bundle", &bundle, "--run", &d("r"), "--variant", "all", "--out", &d("e")][..], &remote].concat())?;
        step(&["replay", &d("e")])
    })();

    match result {
        Ok(()) => println!("\nlive run complete; reports under {out}/*/report.json"),
        Err(e) => {
            eprintln!("\nlive run failed: {e}");
            std::process::exit(1);
        }
    }
}
