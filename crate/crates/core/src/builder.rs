//! One-pass offline construction of a [`MemoryGraph`] from preprocessed
//! artefacts.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bm25::{Bm25Params, LexicalIndex};
use crate::graph::{
    edge_weight, Edge, EdgeKind, EdgeWeight, Entity, Episode, GraphError, GraphNode, Layer,
    MemoryGraph, NodeBody, NodeId, NodeIx, Role, SemanticTriple, VisualClip,
};
use crate::text::{canonical_key, contains_phrase, tokenize, Canonicalizer};
use crate::time::{window_ordinal, Granularity, TimeSpan, Timestamp};

/// Gaps up to this many seconds count as continuous recording.
const SKEW_TOLERANCE_SECS: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRow {
    pub granularity: Granularity,
    pub start: Timestamp,
    pub end: Timestamp,
    pub text: String,
}

impl CaptionRow {
    pub fn span(&self) -> TimeSpan {
        TimeSpan::new(self.start, self.end)
    }

    pub fn node_id(&self) -> NodeId {
        NodeId::episode(self.granularity, self.span())
    }
}

/// An entity named in a 30 s window. A row without a window asks the
/// builder to find the windows by exact case-insensitive name search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRow {
    pub entity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Timestamp>,
}

/// One extracted triple. `removes` lists earlier rows (by position in the
/// triple list) that this row's consolidation superseded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleRow {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub snapshot: Timestamp,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removes: Vec<usize>,
}

impl TripleRow {
    pub fn render(&self) -> String {
        alloc::format!("({}, {}, {})", self.subject, self.predicate, self.object)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualRow {
    pub start: Timestamp,
    pub end: Timestamp,
    pub embedding: Vec<f32>,
    #[serde(default)]
    pub frames: Vec<String>,
}

impl VisualRow {
    pub fn span(&self) -> TimeSpan {
        TimeSpan::new(self.start, self.end)
    }
}

/// Everything preprocessing hands to the graph builder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArtefactBundle {
    pub captions: Vec<CaptionRow>,
    pub mentions: Vec<MentionRow>,
    pub triples: Vec<TripleRow>,
    pub visual: Vec<VisualRow>,
    /// Text embeddings of episode and triple nodes, keyed by node id.
    pub text_embeddings: BTreeMap<NodeId, Vec<f32>>,
}

impl ArtefactBundle {
    /// Node ids the triple rows will receive, in row order.
    pub fn triple_ids(&self) -> Vec<NodeId> {
        let mut per_snapshot: BTreeMap<Timestamp, usize> = BTreeMap::new();
        self.triples
            .iter()
            .map(|row| {
                let n = per_snapshot.entry(row.snapshot).or_default();
                let id = NodeId::triple(row.snapshot, *n);
                *n += 1;
                id
            })
            .collect()
    }

    /// `(node id, text)` of every node that needs a text embedding.
    pub fn embedding_inputs(&self) -> Vec<(NodeId, String)> {
        let mut out: Vec<(NodeId, String)> =
            self.captions.iter().map(|c| (c.node_id(), c.text.clone())).collect();
        out.extend(self.triple_ids().into_iter().zip(self.triples.iter().map(TripleRow::render)));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// Entity id first-person mentions resolve to.
    pub narrator: String,
    pub bm25: Bm25Params,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig { narrator: "A1_JAKE".into(), bm25: Bm25Params::default() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BuildError {
    #[error("mentions reference unknown 30 s windows: {0:?}")]
    DanglingMentions(Vec<(String, Timestamp)>),
    #[error("nodes without a text embedding: {0:?}")]
    MissingEmbeddings(Vec<NodeId>),
    #[error("two caption rows map to node {0}")]
    DuplicateCaption(NodeId),
    #[error("more than one visual clip for the 30 s window of {0}")]
    DuplicateClip(NodeId),
    #[error("triple row {row} removes row {target}, which is not an earlier row")]
    BadRemoval { row: usize, target: usize },
    #[error("{what} embedding of {node} has dimension {found}, expected {expected}")]
    DimensionMismatch { what: &'static str, node: NodeId, expected: usize, found: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildWarning {
    /// A finer window that no coarser window of the next layer covers.
    UncoveredWindow { node: NodeId, parent_layer: Granularity },
    ClipWithoutEpisode(NodeId),
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub graph: MemoryGraph,
    pub warnings: Vec<BuildWarning>,
}

/// Mutable staging area for graph construction.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<GraphNode>,
    edges: Vec<Edge>,
    edge_keys: BTreeSet<(EdgeKind, NodeIx, NodeIx)>,
    by_id: BTreeMap<NodeId, NodeIx>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: GraphNode) -> Result<NodeIx, GraphError> {
        let ix = NodeIx(self.nodes.len() as u32);
        if self.by_id.insert(node.id.clone(), ix).is_some() {
            return Err(GraphError::DuplicateNode(node.id));
        }
        self.nodes.push(node);
        Ok(ix)
    }

    pub fn node(&self, ix: NodeIx) -> &GraphNode {
        &self.nodes[ix.index()]
    }

    pub fn lookup(&self, id: &str) -> Option<NodeIx> {
        self.by_id.get(id).copied()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Adds an edge with its scheduled weight. Returns false when the
    /// schedule drops it or an identical edge already exists.
    pub fn add_edge(
        &mut self,
        kind: EdgeKind,
        from: NodeIx,
        to: NodeIx,
        gap_secs: Option<u64>,
    ) -> bool {
        let weight = match edge_weight(kind, gap_secs).expect("builder passes gaps consistently") {
            EdgeWeight::Weight(w) => w,
            EdgeWeight::Dropped => return false,
        };
        if !self.edge_keys.insert((kind, from, to)) {
            return false;
        }
        self.edges.push(Edge { kind, from, to, weight });
        true
    }

    fn episodes_of(&self, g: Granularity) -> Vec<(NodeIx, TimeSpan)> {
        let mut out: Vec<(NodeIx, TimeSpan)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.body {
                NodeBody::Episode(e) if e.granularity == g => Some((NodeIx(i as u32), e.span)),
                _ => None,
            })
            .collect();
        out.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Links adjacent same-granularity episodes with time-decayed weights.
    pub fn link_temporal(&mut self) -> usize {
        let mut added = 0;
        for g in Granularity::ALL {
            let eps = self.episodes_of(g);
            for pair in eps.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let raw = b.1.start.secs().saturating_sub(a.1.end.secs());
                let gap = if raw <= SKEW_TOLERANCE_SECS { 0 } else { raw };
                if self.add_edge(EdgeKind::TemporalNext, a.0, b.0, Some(gap)) {
                    added += 1;
                }
            }
        }
        added
    }

    /// Adjacent-layer containment (3 min -> 30 s, 10 min -> 3 min,
    /// 1 h -> 10 min) plus 1 h -> 30 s skip edges. A finer window belongs
    /// to the coarser window containing its midpoint.
    pub fn link_contains(&mut self) -> (usize, Vec<BuildWarning>) {
        let mut added = 0;
        let mut warnings = Vec::new();
        let layers = [
            (Granularity::Sec30, Granularity::Min3, Layer::Adjacent),
            (Granularity::Min3, Granularity::Min10, Layer::Adjacent),
            (Granularity::Min10, Granularity::Hour1, Layer::Adjacent),
            (Granularity::Sec30, Granularity::Hour1, Layer::Skip),
        ];
        for (fine, coarse, layer) in layers {
            let parents = self.episodes_of(coarse);
            if parents.is_empty() {
                continue;
            }
            for (child, span) in self.episodes_of(fine) {
                let mid = span.midpoint();
                // parents are sorted by start; last one starting at or before mid
                let pos = parents.partition_point(|(_, p)| p.start <= mid);
                let parent = pos
                    .checked_sub(1)
                    .map(|i| parents[i])
                    .filter(|(_, p)| mid <= p.end);
                match parent {
                    Some((p, _)) => {
                        if self.add_edge(EdgeKind::Contains(layer), p, child, None) {
                            added += 1;
                        }
                    }
                    None if layer == Layer::Adjacent => warnings.push(BuildWarning::UncoveredWindow {
                        node: self.nodes[child.index()].id.clone(),
                        parent_layer: coarse,
                    }),
                    None => {}
                }
            }
        }
        (added, warnings)
    }

    /// Adds `appeared_in(entity -> clip)` for every `mentioned_in(entity ->
    /// episode)` whose episode has a `co_clip`. Idempotent.
    pub fn materialize_appeared_in(&mut self) -> usize {
        let mut clips_of: BTreeMap<NodeIx, Vec<NodeIx>> = BTreeMap::new();
        for e in self.edges.iter().filter(|e| e.kind == EdgeKind::CoClip) {
            clips_of.entry(e.from).or_default().push(e.to);
        }
        let pairs: Vec<(NodeIx, NodeIx)> = self
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::MentionedIn)
            .flat_map(|e| {
                clips_of
                    .get(&e.to)
                    .into_iter()
                    .flatten()
                    .map(move |&clip| (e.from, clip))
            })
            .collect();
        pairs
            .into_iter()
            .filter(|&(entity, clip)| self.add_edge(EdgeKind::AppearedIn, entity, clip, None))
            .count()
    }

    pub fn finish(self, lexical: LexicalIndex) -> Result<MemoryGraph, GraphError> {
        MemoryGraph::from_parts(self.nodes, self.edges, lexical)
    }
}

fn check_dim(
    what: &'static str,
    node: &NodeId,
    v: &[f32],
    expected: &mut Option<usize>,
) -> Result<(), BuildError> {
    match *expected {
        None => {
            *expected = Some(v.len());
            Ok(())
        }
        Some(d) if d == v.len() => Ok(()),
        Some(d) => Err(BuildError::DimensionMismatch {
            what,
            node: node.clone(),
            expected: d,
            found: v.len(),
        }),
    }
}

/// Builds the full graph: all four node kinds, all six edge kinds and the
/// BM25 index over 30 s captions.
pub fn build_graph(bundle: &ArtefactBundle, config: &BuildConfig) -> Result<BuildOutput, BuildError> {
    let canon = Canonicalizer::new(config.narrator.clone());
    let mut b = GraphBuilder::new();
    let mut warnings = Vec::new();
    let mut text_dim = None;
    let mut vis_dim = None;

    // Episodes.
    let mut missing = Vec::new();
    let mut sec30_by_ordinal: BTreeMap<u64, NodeIx> = BTreeMap::new();
    for row in &bundle.captions {
        let id = row.node_id();
        let Some(embedding) = bundle.text_embeddings.get(&id) else {
            missing.push(id);
            continue;
        };
        check_dim("text", &id, embedding, &mut text_dim)?;
        let node = GraphNode {
            id: id.clone(),
            body: NodeBody::Episode(Episode {
                granularity: row.granularity,
                span: row.span(),
                caption: row.text.clone(),
                embedding: embedding.clone(),
            }),
        };
        let ix = b.add_node(node).map_err(|_| BuildError::DuplicateCaption(id))?;
        if row.granularity == Granularity::Sec30 {
            sec30_by_ordinal.insert(window_ordinal(row.start), ix);
        }
    }

    // Triples: node ids and embeddings are checked before anything is added.
    let triple_ids = bundle.triple_ids();
    for id in &triple_ids {
        if !bundle.text_embeddings.contains_key(id) {
            missing.push(id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(BuildError::MissingEmbeddings(missing));
    }

    // Visual clips and co_clip.
    let mut clip_ordinals = BTreeSet::new();
    for row in &bundle.visual {
        let id = NodeId::visual_clip(row.span());
        check_dim("visual", &id, &row.embedding, &mut vis_dim)?;
        let ordinal = window_ordinal(row.start);
        if !clip_ordinals.insert(ordinal) {
            return Err(BuildError::DuplicateClip(id));
        }
        let ix = b.add_node(GraphNode {
            id: id.clone(),
            body: NodeBody::VisualClip(VisualClip {
                span: row.span(),
                embedding: row.embedding.clone(),
                frames: row.frames.clone(),
            }),
        })?;
        match sec30_by_ordinal.get(&ordinal) {
            Some(&ep) => {
                b.add_edge(EdgeKind::CoClip, ep, ix, None);
            }
            None => warnings.push(BuildWarning::ClipWithoutEpisode(id)),
        }
    }

    // Entities and mentioned_in.
    let mut entities: BTreeMap<String, NodeIx> = BTreeMap::new();
    let mut entity_ix = |b: &mut GraphBuilder, raw: &str| -> Result<NodeIx, BuildError> {
        let key = canon.key(raw);
        if let Some(&ix) = entities.get(&key) {
            return Ok(ix);
        }
        let name = canon.display(raw);
        let ix = b.add_node(GraphNode {
            id: NodeId::entity(&name),
            body: NodeBody::Entity(Entity { name }),
        })?;
        entities.insert(key, ix);
        Ok(ix)
    };
    let sec30_tokens: Vec<(NodeIx, Vec<String>)> = bundle
        .captions
        .iter()
        .filter(|c| c.granularity == Granularity::Sec30)
        .filter_map(|c| b.lookup(c.node_id().as_str()).map(|ix| (ix, tokenize(&c.text))))
        .collect();
    let mut dangling = Vec::new();
    for m in &bundle.mentions {
        if canon.key(&m.entity).is_empty() {
            continue;
        }
        match m.window {
            Some(w) => match sec30_by_ordinal.get(&window_ordinal(w)) {
                Some(&ep) => {
                    let e = entity_ix(&mut b, &m.entity)?;
                    b.add_edge(EdgeKind::MentionedIn, e, ep, None);
                }
                None => dangling.push((m.entity.clone(), w)),
            },
            None => {
                let e = entity_ix(&mut b, &m.entity)?;
                let phrase = tokenize(&canon.display(&m.entity));
                for (ep, tokens) in &sec30_tokens {
                    if contains_phrase(tokens, &phrase) {
                        b.add_edge(EdgeKind::MentionedIn, e, *ep, None);
                    }
                }
            }
        }
    }
    if !dangling.is_empty() {
        return Err(BuildError::DanglingMentions(dangling));
    }

    // Triples with tombstones from the consolidation log.
    let mut tombstone: Vec<Option<Timestamp>> = alloc::vec![None; bundle.triples.len()];
    for (row_ix, row) in bundle.triples.iter().enumerate() {
        for &target in &row.removes {
            if target >= row_ix {
                return Err(BuildError::BadRemoval { row: row_ix, target });
            }
            let slot = &mut tombstone[target];
            *slot = Some(slot.map_or(row.snapshot, |s| s.min(row.snapshot)));
        }
    }
    for ((row, id), tomb) in bundle.triples.iter().zip(&triple_ids).zip(tombstone) {
        let embedding = &bundle.text_embeddings[id];
        check_dim("text", id, embedding, &mut text_dim)?;
        let ix = b.add_node(GraphNode {
            id: id.clone(),
            body: NodeBody::Triple(SemanticTriple {
                subject: row.subject.clone(),
                predicate: row.predicate.clone(),
                object: row.object.clone(),
                snapshot: row.snapshot,
                tombstoned_by: tomb,
                embedding: embedding.clone(),
            }),
        })?;
        let subject = entities.get(&canon.key(&row.subject)).copied();
        let object = entities.get(&canon.key(&row.object)).copied();
        if let Some(s) = subject {
            b.add_edge(EdgeKind::HasProperty(Role::Subject), s, ix, None);
        }
        if let Some(o) = object.filter(|&o| Some(o) != subject) {
            b.add_edge(EdgeKind::HasProperty(Role::Object), o, ix, None);
        }
    }

    b.link_temporal();
    let (_, contain_warnings) = b.link_contains();
    warnings.extend(contain_warnings);
    b.materialize_appeared_in();

    let lexical = {
        let docs: Vec<(NodeIx, &NodeId, &str)> = sec30_tokens
            .iter()
            .map(|(ix, _)| {
                let n = b.node(*ix);
                (*ix, &n.id, n.as_episode().map_or("", |e| e.caption.as_str()))
            })
            .collect();
        LexicalIndex::build(docs, config.bm25)
    };
    let graph = b.finish(lexical)?;
    Ok(BuildOutput { graph, warnings })
}

/// Canonical key of an entity name as used by [`MemoryGraph::entity`].
pub fn entity_key(name: &str) -> String {
    canonical_key(name)
}
