//! The knowledge base: deduplicated knowledge sentences drawn from the
//! corpus annotations, addressed by contiguous 1-based ids.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, SplitAssignment};
use crate::error::{Error, Result};

pub const KB_FILE: &str = "kb.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeInstance {
    pub kb_id: usize,
    pub text: String,
    pub source_instance_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    entries: Vec<KnowledgeInstance>,
    by_text: HashMap<String, usize>,
}

/// Dedup key: trimmed, internal whitespace collapsed, case-folded.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl KnowledgeBase {
    /// Builds a knowledge base from the annotations of instances whose
    /// episode lies in `from_splits`. Entries keep first-occurrence order and
    /// the text of their first occurrence.
    pub fn build(corpus: &Corpus, split: &SplitAssignment, from_splits: &[Split]) -> Result<Self> {
        Self::from_texts(
            corpus
                .instances_in(split, from_splits)
                .map(|q| (q.id.as_str(), q.knowledge_text.as_str())),
        )
    }

    /// Builds from every instance in the corpus regardless of split.
    pub fn build_all(corpus: &Corpus) -> Result<Self> {
        Self::from_texts(
            corpus
                .instances
                .iter()
                .map(|q| (q.id.as_str(), q.knowledge_text.as_str())),
        )
    }

    fn from_texts<'a>(items: impl Iterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut entries: Vec<KnowledgeInstance> = Vec::new();
        let mut by_text = HashMap::new();
        for (id, text) in items {
            let key = normalize(text);
            if key.is_empty() {
                continue;
            }
            let idx = *by_text.entry(key).or_insert_with(|| {
                entries.push(KnowledgeInstance {
                    kb_id: entries.len() + 1,
                    text: text.trim().to_string(),
                    source_instance_ids: Vec::new(),
                });
                entries.len() - 1
            });
            entries[idx].source_instance_ids.push(id.to_string());
        }
        if entries.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        Ok(Self { entries, by_text })
    }

    pub fn from_entries(entries: Vec<KnowledgeInstance>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        let mut by_text = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.kb_id != i + 1 {
                return Err(Error::InvalidConfig(format!(
                    "knowledge ids must be contiguous from 1, entry {i} has id {}",
                    e.kb_id
                )));
            }
            let key = normalize(&e.text);
            if key.is_empty() || by_text.insert(key, i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "knowledge entry {} is empty or duplicated",
                    e.kb_id
                )));
            }
        }
        Ok(Self { entries, by_text })
    }

    /// Size N.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KnowledgeInstance] {
        &self.entries
    }

    pub fn lookup(&self, kb_id: usize) -> Result<&KnowledgeInstance> {
        if kb_id == 0 || kb_id > self.entries.len() {
            return Err(Error::KnowledgeIdOutOfRange {
                id: kb_id,
                size: self.entries.len(),
            });
        }
        Ok(&self.entries[kb_id - 1])
    }

    /// Id of the entry matching `text` after normalization.
    pub fn find(&self, text: &str) -> Option<usize> {
        self.by_text.get(&normalize(text)).map(|i| i + 1)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut buf, e).expect("entry serializes");
            buf.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: KnowledgeInstance =
                serde_json::from_str(line).map_err(|err| Error::MalformedRecord {
                    file: KB_FILE.into(),
                    line: i + 1,
                    field: "<record>".into(),
                    message: err.to_string(),
                })?;
            entries.push(e);
        }
        Self::from_entries(entries)
    }
}
