use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheMode {
    Disabled,
    Memory,
    /// In-memory plus one `<digest>.json` record per response under the directory.
    Disk(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedReply {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(default)]
    pub image_tokens: u64,
    pub tokens_estimated: bool,
}

/// Response cache keyed by request digest.
pub struct ResponseCache {
    mode: CacheMode,
    mem: Mutex<HashMap<String, CachedReply>>,
}

impl ResponseCache {
    pub fn new(mode: CacheMode) -> Self {
        if let CacheMode::Disk(dir) = &mode {
            if let Err(e) = fs::create_dir_all(dir) {
                log::warn!("cannot create cache directory {}: {e}", dir.display());
            }
        }
        ResponseCache {
            mode,
            mem: Mutex::new(HashMap::new()),
        }
    }

    pub fn mode(&self) -> &CacheMode {
        &self.mode
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        match &self.mode {
            CacheMode::Disk(dir) => Some(dir.join(format!("{key}.json"))),
            _ => None,
        }
    }

    pub fn get(&self, key: &str) -> Option<CachedReply> {
        if self.mode == CacheMode::Disabled {
            return None;
        }
        if let Some(hit) = self.mem.lock().expect("cache lock").get(key) {
            return Some(hit.clone());
        }
        let text = fs::read_to_string(self.path(key)?).ok()?;
        let reply: CachedReply = serde_json::from_str(&text).ok()?;
        self.mem
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), reply.clone());
        Some(reply)
    }

    pub fn put(&self, key: &str, reply: &CachedReply) {
        if self.mode == CacheMode::Disabled {
            return;
        }
        self.mem
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), reply.clone());
        if let Some(path) = self.path(key) {
            let tmp = path.with_extension("json.tmp");
            let json = serde_json::to_string(reply).expect("serializable reply");
            if let Err(e) = fs::write(&tmp, json).and_then(|_| fs::rename(&tmp, &path)) {
                log::warn!("cannot persist cache record {}: {e}", path.display());
            }
        }
    }

    pub fn len(&self) -> usize {
        self.mem.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
