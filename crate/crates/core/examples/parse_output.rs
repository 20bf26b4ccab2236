//! Repairing and grounding messy model output.
//!
//!     cargo run --example parse_output

use ttprompt::corpus::LabelSchema;
use ttprompt::llm::{parse_entities, ParseOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = LabelSchema::from_names("demo", &["ThreatActor", "Malware", "Tool"])?;
    let text = "APT28 deployed X-Agent and used Mimikatz.";
    let raw = "Sure! Here are the entities:\n```json\n[{\"span\": \"APT28\", \"type\": \"ThreatActor\"},\n {\"span\": \"X-Agent\", \"type\": \"Malware\"},\n {\"span\": \"Cobalt Strike\", \"type\": \"Tool\"},\n {\"span\": \"Mimikatz\", \"type\": \"Password\"},]\n```";

    for (name, opts) in [("strict", ParseOptions::strict(text)), ("lenient", ParseOptions::lenient(text))] {
        let parsed = parse_entities(raw, &schema, &opts);
        println!("{name}: {}", parsed.entities.to_json());
        println!("  repairs: {:?}", parsed.repair_log);
        println!("  dropped: {:?}", parsed.dropped);
        println!("  ungrounded: {:?}", parsed.ungrounded);
    }
    Ok(())
}
