//! Exact-match micro and macro F1 for a handful of predictions.
//!
//!     cargo run --example score_predictions

use std::collections::BTreeMap;

use ttprompt::corpus::{AnnotatedDoc, EntityMention, EntitySet, LabelSchema};
use ttprompt::metrics::{score, MacroAveraging};

fn set(pairs: &[(&str, &str)]) -> EntitySet {
    let mut s = EntitySet::new();
    for (span, ty) in pairs {
        s.insert(EntityMention::new(*span, *ty));
    }
    s
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = LabelSchema::from_names("demo", &["ThreatActor", "Malware", "Tool"])?;
    let gold = vec![
        AnnotatedDoc::new("a", "APT28 used Mimikatz.", set(&[("APT28", "ThreatActor"), ("Mimikatz", "Tool")])),
        AnnotatedDoc::new("b", "Emotet dropped QakBot.", set(&[("Emotet", "Malware"), ("QakBot", "Malware")])),
    ];
    let mut predictions = BTreeMap::new();
    // trailing whitespace is normalised away; the wrong type is not
    predictions.insert("a".to_string(), set(&[("APT28 ", "ThreatActor"), ("Mimikatz", "Malware")]));
    predictions.insert("b".to_string(), set(&[("Emotet", "Malware")]));

    let report = score(&predictions, &gold, &schema, MacroAveraging::GoldObserved)?;
    print!("{}", report.to_table());
    Ok(())
}
