use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatRequest};

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    model: String,
    request_tag: String,
    messages: Vec<ChatMessage>,
    response: String,
}

/// Content-addressed response store. With a directory, entries are written
/// to `<root>/llm/<key>.json` and survive across runs.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            dir: None,
            memory: Mutex::new(HashMap::new()),
        }
    }

    pub fn on_disk(root: &Path) -> Self {
        ResponseCache {
            dir: Some(root.join("llm")),
            memory: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, String> {
        if let Some(hit) = self.memory.lock().expect("cache lock").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.path(key) else {
            return Ok(None);
        };
        match fs::read_to_string(&path) {
            Ok(raw) => {
                let entry: CacheEntry =
                    serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
                self.memory
                    .lock()
                    .expect("cache lock")
                    .insert(key.to_string(), entry.response.clone());
                Ok(Some(entry.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(format!("{}: {e}", path.display())),
        }
    }

    pub fn put(&self, key: &str, request: &ChatRequest, response: &str) -> Result<(), String> {
        if let Some(path) = self.path(key) {
            let dir = path.parent().expect("cache files live in a directory");
            fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            let entry = CacheEntry {
                key: key.to_string(),
                model: request.model.clone(),
                request_tag: request.request_tag.clone(),
                messages: request.messages.clone(),
                response: response.to_string(),
            };
            let raw = serde_json::to_string_pretty(&entry).expect("cache entries serialize");
            // write-then-rename so concurrent readers never see a partial file
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            fs::write(&tmp, raw).map_err(|e| format!("{}: {e}", tmp.display()))?;
            fs::rename(&tmp, &path).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), response.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.dir {
            Some(d) => fs::read_dir(d)
                .map(|it| {
                    it.filter_map(|e| e.ok())
                        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                        .count()
                })
                .unwrap_or(0),
            None => self.memory.lock().expect("cache lock").len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_entries_survive_a_new_cache_instance() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::new("m", vec![ChatMessage::user("hi")]);
        let key = req.cache_key();
        ResponseCache::on_disk(dir.path()).put(&key, &req, "hello").unwrap();
        let fresh = ResponseCache::on_disk(dir.path());
        assert_eq!(fresh.get(&key).unwrap().as_deref(), Some("hello"));
        assert!(dir.path().join("llm").join(format!("{key}.json")).exists());
        assert_eq!(fresh.len(), 1);
    }
}
