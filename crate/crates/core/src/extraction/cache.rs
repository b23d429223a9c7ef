//! Append-only extraction cache.
//!
//! One JSON record per line: `{"key": <hex sha256>, "kind": ..., "value": {...}}`.
//! Later lines for the same key win. Reads are concurrent; appends are
//! serialized behind a mutex.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::response::PolarPhrases;
use super::ExtractionKind;

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    kind: ExtractionKind,
    value: PolarPhrases,
}

/// Key over (template version, kind, serialized inputs, model id).
pub fn cache_key(template_version: &str, kind: ExtractionKind, inputs: &str, model_id: &str) -> String {
    let mut h = Sha256::new();
    for part in [template_version, kind.as_str(), inputs, model_id] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

pub struct ExtractionCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, PolarPhrases>>,
    writer: Mutex<Option<File>>,
}

impl ExtractionCache {
    /// Cache that lives only in memory.
    pub fn in_memory() -> Self {
        ExtractionCache {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Open (or create) a cache file. Unparseable lines, e.g. a torn final
    /// write, are ignored.
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if let Ok(rec) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(rec.key, rec.value);
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let existing = std::fs::read(&path)?;
        if existing.last().is_some_and(|&b| b != b'\n') {
            file.write_all(b"\n")?;
        }
        Ok(ExtractionCache {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<PolarPhrases> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: &str, kind: ExtractionKind, value: &PolarPhrases) -> std::io::Result<()> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(file) = writer.as_mut() {
            let line = CacheLine {
                key: key.to_string(),
                kind,
                value: value.clone(),
            };
            let mut buf = serde_json::to_vec(&line).map_err(std::io::Error::other)?;
            buf.push(b'\n');
            file.write_all(&buf)?;
            file.flush()?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(key.to_string(), value.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PolarPhrases {
        PolarPhrases {
            positive: vec!["crunchy texture".into()],
            negative: vec![],
        }
    }

    #[test]
    fn key_depends_on_every_part() {
        let base = cache_key("v1", ExtractionKind::ItemFeature, "in", "m");
        assert_ne!(base, cache_key("v2", ExtractionKind::ItemFeature, "in", "m"));
        assert_ne!(base, cache_key("v1", ExtractionKind::UserPreference, "in", "m"));
        assert_ne!(base, cache_key("v1", ExtractionKind::ItemFeature, "in2", "m"));
        assert_ne!(base, cache_key("v1", ExtractionKind::ItemFeature, "in", "m2"));
        // no ambiguity from concatenation
        assert_ne!(
            cache_key("v1", ExtractionKind::ItemFeature, "ab", "c"),
            cache_key("v1", ExtractionKind::ItemFeature, "a", "bc")
        );
    }

    #[test]
    fn put_then_get_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = ExtractionCache::open(&path).unwrap();
            cache.put("k", ExtractionKind::ItemFeature, &sample()).unwrap();
            assert_eq!(cache.get("k"), Some(sample()));
        }
        let reopened = ExtractionCache::open(&path).unwrap();
        assert_eq!(reopened.get("k"), Some(sample()));
        assert_eq!(reopened.len(), 1);
    }

    #[test]
    fn torn_line_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, "{\"key\":\"k\",\"kind\":\"item_feature\",\"value\":{\"positive\":[],\"negative\":[]}}\n{\"key\":").unwrap();
        let cache = ExtractionCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
    }
}
