//! The LLM gateway against a scripted backend: transient failures are
//! retried, answers are cached on disk, and the call budget is enforced.
//!
//!     cargo run --example gateway_script

use std::sync::Arc;

use ttprompt::llm::{
    ChatMessage, ChatRequest, Gateway, Matcher, MockReply, MockScript, ResponseCache, RetryPolicy, ScriptedBackend,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let script = MockScript::default()
        .rule(
            Matcher::contains("APT28"),
            vec![MockReply::Transient, MockReply::text(r#"[{"span": "APT28", "type": "ThreatActor"}]"#)],
        )
        .with_default("[]");
    let cache_dir = tempfile::tempdir()?;
    let gateway = Gateway::new(Arc::new(ScriptedBackend::new(script)))
        .with_retry(RetryPolicy::no_delay())
        .with_cache(ResponseCache::on_disk(cache_dir.path()))
        .with_budget(Some(3));

    let ask = |text: &str| ChatRequest::new("qwen3-32b", vec![ChatMessage::user(text)]).with_tag("execute/demo");
    println!("first:  {}", gateway.complete(&ask("APT28 used Mimikatz."))?);
    println!("cached: {}", gateway.complete(&ask("APT28 used Mimikatz."))?);
    println!("other:  {}", gateway.complete(&ask("Nothing here."))?);
    println!("{:?}", gateway.stats());
    match gateway.complete(&ask("One more.")) {
        Ok(r) => println!("unexpected: {r}"),
        Err(e) => println!("budget stop: {e}"),
    }
    Ok(())
}
