//! Artefact directory IO.
//!
//! A corpus directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `captions.jsonl` | caption rows of every granularity (`granularity`, `start`, `end`, `text`) |
//! | `mentions.jsonl` | entity mentions (`entity`, `window`) |
//! | `triples.jsonl` | consolidated triple rows (`subject`, `predicate`, `object`, `snapshot`, `removes`) |
//! | `visual.jsonl` | visual clip windows and frame references |
//! | `embeddings.bin` + `embeddings.manifest.jsonl` | little-endian `f32` vectors and their index |
//! | `chains.jsonl` | topic and event chains |
//! | `questions.jsonl`, `gold.jsonl` | evaluation questions and gold spans |
//! | `script.jsonl` | scripted replies for the mock chat provider |
//! | `graph.mmg` | the built graph |
//! | `cache/` | content-addressed provider replies |

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mmg_core::{ArtefactBundle, CaptionRow, ChainStore, EventChain, MentionRow, NodeId, Timestamp, TopicChain, TripleRow, VisualRow};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const CAPTIONS: &str = "captions.jsonl";
pub const MENTIONS: &str = "mentions.jsonl";
pub const TRIPLES: &str = "triples.jsonl";
pub const VISUAL: &str = "visual.jsonl";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const EMBEDDINGS_MANIFEST: &str = "embeddings.manifest.jsonl";
pub const CHAINS: &str = "chains.jsonl";
pub const QUESTIONS: &str = "questions.jsonl";
pub const GOLD: &str = "gold.jsonl";
pub const SCRIPT: &str = "script.jsonl";
pub const GRAPH: &str = "graph.mmg";
pub const CACHE_DIR: &str = "cache";

#[derive(Debug, thiserror::Error)]
pub enum ArtefactError {
    #[error("{path}: file not found")]
    Missing { path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ArtefactError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ArtefactError::Missing { path: path.to_path_buf() }
        } else {
            ArtefactError::Io { path: path.to_path_buf(), source }
        }
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ArtefactError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ArtefactError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Like [`read_jsonl`] but an absent file reads as empty.
pub fn read_jsonl_opt<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ArtefactError> {
    match read_jsonl(path) {
        Err(ArtefactError::Missing { .. }) => Ok(Vec::new()),
        other => other,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ArtefactError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| ArtefactError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// A visual clip window; its embedding lives in the embedding store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualRecord {
    pub start: Timestamp,
    pub end: Timestamp,
    #[serde(default)]
    pub frames: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSlot {
    Text,
    Visual,
    Chain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreEntry {
    key: String,
    slot: EmbeddingSlot,
    offset: u64,
    dim: u32,
}

/// Keyed embeddings by slot: node ids for text and visual, chain keys for
/// chains.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    pub vectors: BTreeMap<(EmbeddingSlot, String), Vec<f32>>,
}

impl EmbeddingStore {
    pub fn get(&self, slot: EmbeddingSlot, key: &str) -> Option<&Vec<f32>> {
        self.vectors.get(&(slot, key.to_string()))
    }

    pub fn insert(&mut self, slot: EmbeddingSlot, key: impl Into<String>, v: Vec<f32>) {
        self.vectors.insert((slot, key.into()), v);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn load(dir: &Path) -> Result<Self, ArtefactError> {
        let manifest_path = dir.join(EMBEDDINGS_MANIFEST);
        let entries: Vec<StoreEntry> = read_jsonl_opt(&manifest_path)?;
        if entries.is_empty() {
            return Ok(Self::default());
        }
        let blob_path = dir.join(EMBEDDINGS);
        let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        let mut store = Self::default();
        for e in entries {
            let start = e.offset as usize;
            let end = start + e.dim as usize * 4;
            let raw = blob.get(start..end).ok_or_else(|| ArtefactError::Invalid {
                path: blob_path.clone(),
                message: format!("vector {} ends at byte {end}, file has {}", e.key, blob.len()),
            })?;
            let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            store.vectors.insert((e.slot, e.key), v);
        }
        Ok(store)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ArtefactError> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.vectors.len());
        for ((slot, key), v) in &self.vectors {
            entries.push(StoreEntry { key: key.clone(), slot: *slot, offset: blob.len() as u64, dim: v.len() as u32 });
            for x in v {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let blob_path = dir.join(EMBEDDINGS);
        fs::write(&blob_path, blob).map_err(io_err(&blob_path))?;
        write_jsonl(&dir.join(EMBEDDINGS_MANIFEST), &entries)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChainRecord {
    Topic(TopicChain),
    Event(EventChain),
}

pub fn chain_key(record: &ChainRecord) -> String {
    match record {
        ChainRecord::Topic(c) => format!("topic:{}", c.entity),
        ChainRecord::Event(c) => format!("event:{}", c.name),
    }
}

/// Chains with embeddings stripped; the store carries them.
pub fn write_chains(dir: &Path, store: &ChainStore, embeddings: &mut EmbeddingStore) -> Result<(), ArtefactError> {
    let mut records = Vec::new();
    for c in &store.topics {
        let mut c = c.clone();
        if !c.embedding.is_empty() {
            embeddings.insert(EmbeddingSlot::Chain, format!("topic:{}", c.entity), std::mem::take(&mut c.embedding));
        }
        records.push(ChainRecord::Topic(c));
    }
    for c in &store.events {
        let mut c = c.clone();
        if !c.embedding.is_empty() {
            embeddings.insert(EmbeddingSlot::Chain, format!("event:{}", c.name), std::mem::take(&mut c.embedding));
        }
        records.push(ChainRecord::Event(c));
    }
    write_jsonl(&dir.join(CHAINS), &records)
}

/// Chains with embeddings attached from the store where present.
pub fn read_chains(dir: &Path, embeddings: &EmbeddingStore) -> Result<ChainStore, ArtefactError> {
    let records: Vec<ChainRecord> = read_jsonl_opt(&dir.join(CHAINS))?;
    let mut store = ChainStore::default();
    for r in records {
        let key = chain_key(&r);
        let emb = embeddings.get(EmbeddingSlot::Chain, &key).cloned();
        match r {
            ChainRecord::Topic(mut c) => {
                if let Some(e) = emb {
                    c.embedding = e;
                }
                store.topics.push(c);
            }
            ChainRecord::Event(mut c) => {
                if let Some(e) = emb {
                    c.embedding = e;
                }
                store.events.push(c);
            }
        }
    }
    Ok(store)
}

/// The graph builder's input, read from `dir`. Text embeddings present in
/// the store are attached; missing ones are left for the caller to fill.
pub fn load_bundle(dir: &Path, embeddings: &EmbeddingStore) -> Result<ArtefactBundle, ArtefactError> {
    let captions: Vec<CaptionRow> = read_jsonl(&dir.join(CAPTIONS))?;
    let mentions: Vec<MentionRow> = read_jsonl(&dir.join(MENTIONS))?;
    let triples: Vec<TripleRow> = read_jsonl(&dir.join(TRIPLES))?;
    let visual_path = dir.join(VISUAL);
    let records: Vec<VisualRecord> = read_jsonl(&visual_path)?;
    let mut visual = Vec::with_capacity(records.len());
    for r in records {
        let id = NodeId::visual_clip(mmg_core::TimeSpan::new(r.start, r.end));
        let embedding = embeddings.get(EmbeddingSlot::Visual, id.as_str()).cloned().ok_or_else(|| {
            ArtefactError::Invalid {
                path: dir.join(EMBEDDINGS_MANIFEST),
                message: format!("no visual embedding for {id} (listed in {})", visual_path.display()),
            }
        })?;
        visual.push(VisualRow { start: r.start, end: r.end, embedding, frames: r.frames });
    }
    let mut bundle = ArtefactBundle { captions, mentions, triples, visual, text_embeddings: BTreeMap::new() };
    for (id, _) in bundle.embedding_inputs() {
        if let Some(v) = embeddings.get(EmbeddingSlot::Text, id.as_str()) {
            bundle.text_embeddings.insert(id, v.clone());
        }
    }
    Ok(bundle)
}

/// One evaluation question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub question: String,
    /// Query time; absent means the end of the corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    /// Gold answer: a choice letter or free text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}
