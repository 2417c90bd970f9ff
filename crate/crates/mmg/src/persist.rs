//! On-disk graph format.
//!
//! Layout: the 8-byte magic `MMGRAPH\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then a blob
//! of little-endian `f32` embeddings. The header holds the nodes with their
//! embeddings stripped, the edges, the BM25 index and a manifest locating
//! every embedding in the blob. Weights are written as JSON numbers with
//! round-trip precision, so a reload is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use mmg_core::graph::{GraphNode, NodeBody};
use mmg_core::{Edge, LexicalIndex, MemoryGraph, NodeId, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"MMGRAPH\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a graph file (bad magic)")]
    BadMagic,
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("graph schema version {found} is not supported (expected {expected})")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("file truncated at byte {offset}: need {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },
    #[error("corrupt header near byte {offset}: {message}")]
    Header { offset: u64, message: String },
    #[error("embedding manifest entry for {node} is invalid: {message}")]
    Manifest { node: NodeId, message: String },
    #[error("graph validation failed: {0}")]
    Graph(#[from] mmg_core::GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Text,
    Visual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub node: NodeId,
    pub slot: Slot,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
    pub dim: u32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    nodes: Vec<GraphNode>,
    edges: Vec<Edge>,
    lexical: LexicalIndex,
    manifest: Vec<ManifestEntry>,
}

fn embedding_mut(node: &mut GraphNode) -> Option<(Slot, &mut Vec<f32>)> {
    match &mut node.body {
        NodeBody::Episode(e) => Some((Slot::Text, &mut e.embedding)),
        NodeBody::Triple(t) => Some((Slot::Text, &mut t.embedding)),
        NodeBody::VisualClip(c) => Some((Slot::Visual, &mut c.embedding)),
        NodeBody::Entity(_) => None,
    }
}

/// Serializes `graph` into the on-disk byte layout.
pub fn encode(graph: &MemoryGraph) -> Vec<u8> {
    let mut nodes = graph.nodes().to_vec();
    let mut manifest = Vec::new();
    let mut blob = Vec::new();
    for node in &mut nodes {
        let id = node.id.clone();
        if let Some((slot, emb)) = embedding_mut(node) {
            let offset = blob.len() as u64;
            for x in emb.iter() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            manifest.push(ManifestEntry {
                node: id,
                slot,
                offset,
                length: (emb.len() * 4) as u64,
                dim: emb.len() as u32,
            });
            emb.clear();
        }
    }
    let header = Header {
        schema_version: graph.schema_version(),
        nodes,
        edges: graph.edges().to_vec(),
        lexical: graph.lexical().clone(),
        manifest,
    };
    let json = serde_json::to_vec(&header).expect("graph header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

fn take(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], PersistError> {
    bytes.get(offset..offset + len).ok_or_else(|| PersistError::Truncated {
        offset: bytes.len() as u64,
        needed: (offset + len - bytes.len()) as u64,
    })
}

/// Inverse of [`encode`]; validates the graph on the way in.
pub fn decode(bytes: &[u8]) -> Result<MemoryGraph, PersistError> {
    if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
        return Err(PersistError::BadMagic);
    }
    let prefix = take(bytes, 0, PREFIX_LEN)?;
    let version = u32::from_le_bytes(prefix[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(PersistError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(prefix[12..20].try_into().expect("8 bytes")) as usize;
    let header_bytes = take(bytes, PREFIX_LEN, header_len)?;
    let mut header: Header = serde_json::from_slice(header_bytes).map_err(|e| PersistError::Header {
        offset: (PREFIX_LEN + header_offset(header_bytes, e.line(), e.column())) as u64,
        message: e.to_string(),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(PersistError::SchemaMismatch { found: header.schema_version, expected: SCHEMA_VERSION });
    }
    let blob_start = PREFIX_LEN + header_len;
    let blob = &bytes[blob_start.min(bytes.len())..];
    let mut by_id: std::collections::HashMap<&NodeId, usize> = std::collections::HashMap::new();
    for (i, n) in header.nodes.iter().enumerate() {
        by_id.insert(&n.id, i);
    }
    let mut fills = Vec::with_capacity(header.manifest.len());
    for entry in &header.manifest {
        let bad = |message: &str| PersistError::Manifest { node: entry.node.clone(), message: message.into() };
        let &ix = by_id.get(&entry.node).ok_or_else(|| bad("unknown node"))?;
        if entry.length != u64::from(entry.dim) * 4 {
            return Err(bad("length does not match dimension"));
        }
        let end = entry.offset + entry.length;
        if end > blob.len() as u64 {
            return Err(PersistError::Truncated {
                offset: bytes.len() as u64,
                needed: end - blob.len() as u64,
            });
        }
        let raw = &blob[entry.offset as usize..end as usize];
        let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        fills.push((ix, entry.slot, v));
    }
    for (ix, slot, v) in fills {
        match embedding_mut(&mut header.nodes[ix]) {
            Some((s, emb)) if s == slot => *emb = v,
            _ => {
                return Err(PersistError::Manifest {
                    node: header.nodes[ix].id.clone(),
                    message: "slot does not match node kind".into(),
                })
            }
        }
    }
    Ok(MemoryGraph::from_parts(header.nodes, header.edges, header.lexical)?)
}

fn header_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

pub fn save(graph: &MemoryGraph, path: &Path) -> Result<(), PersistError> {
    let io = |e| PersistError::Io { path: path.display().to_string(), source: e };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode(graph)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<MemoryGraph, PersistError> {
    let bytes = fs::read(path).map_err(|e| PersistError::Io { path: path.display().to_string(), source: e })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmg_core::{build_graph, ArtefactBundle, BuildConfig, CaptionRow, Granularity, MentionRow, Timestamp, TripleRow, VisualRow};

    fn t(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    fn graph() -> MemoryGraph {
        let mut bundle = ArtefactBundle {
            captions: vec![
                CaptionRow { granularity: Granularity::Sec30, start: t("DAY1 17:42:00"), end: t("DAY1 17:42:30"), text: "Katrina asks about hot pot".into() },
                CaptionRow { granularity: Granularity::Sec30, start: t("DAY1 17:42:30"), end: t("DAY1 17:43:00"), text: "Shure picks meat".into() },
            ],
            mentions: vec![MentionRow { entity: "Katrina".into(), window: Some(t("DAY1 17:42:00")) }],
            triples: vec![TripleRow { subject: "Katrina".into(), predicate: "asks about".into(), object: "hot pot".into(), snapshot: t("DAY1 17:42:00"), removes: vec![] }],
            visual: vec![VisualRow { start: t("DAY1 17:42:00"), end: t("DAY1 17:42:30"), embedding: vec![0.25, -1.5, 3.0e-7], frames: vec!["f/0001.jpg".into()] }],
            text_embeddings: Default::default(),
        };
        for (i, (id, _)) in bundle.embedding_inputs().into_iter().enumerate() {
            bundle.text_embeddings.insert(id, vec![i as f32 * 0.1 + 1.0 / 3.0, -0.7]);
        }
        build_graph(&bundle, &BuildConfig::default()).unwrap().graph
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let g = graph();
        let bytes = encode(&g);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, g);
        for (a, b) in g.edges().iter().zip(back.edges()) {
            assert_eq!(a.weight.to_bits(), b.weight.to_bits());
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&graph());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(PersistError::VersionMismatch { found: 7, expected: 1 })));
    }

    #[test]
    fn truncation_names_the_offset() {
        let bytes = encode(&graph());
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut) {
            Err(PersistError::Truncated { offset, needed }) => {
                assert_eq!(offset, cut.len() as u64);
                assert_eq!(needed, 3);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(&bytes[..10]), Err(PersistError::Truncated { .. })));
    }

    #[test]
    fn corrupt_header_reports_position() {
        let mut bytes = encode(&graph());
        bytes[PREFIX_LEN] = b'#';
        match decode(&bytes) {
            Err(PersistError::Header { offset, .. }) => assert_eq!(offset, PREFIX_LEN as u64),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"NOTAGRAPHFILE_______________"), Err(PersistError::BadMagic)));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.mmg");
        let g = graph();
        save(&g, &path).unwrap();
        assert_eq!(load(&path).unwrap(), g);
        assert!(matches!(load(&dir.path().join("missing.mmg")), Err(PersistError::Io { .. })));
    }
}
