//! Heterogeneous memory graph: four node kinds, six typed weighted edges.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::bm25::LexicalIndex;
use crate::text::canonical_key;
use crate::time::{Granularity, TimeSpan, Timestamp};

/// Version of the persisted graph layout. Bumped on any incompatible change.
pub const SCHEMA_VERSION: u32 = 1;

/// Edges spanning a longer pause than this (seconds) are not linked.
pub const TEMPORAL_CUTOFF_SECS: u64 = 21_600;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn episode(granularity: Granularity, span: TimeSpan) -> NodeId {
        let label = granularity.label();
        let day = span.start.day();
        NodeId(match granularity {
            Granularity::Sec30 | Granularity::Min3 => {
                format!("episode_{label}_DAY{day}_{}", span.start.clock())
            }
            Granularity::Min10 | Granularity::Hour1 => format!(
                "episode_{label}_DAY{day}_{}--{}",
                span.start.clock_minutes(),
                span.end.clock_minutes()
            ),
        })
    }

    pub fn visual_clip(span: TimeSpan) -> NodeId {
        NodeId(format!(
            "visual_clip_DAY{}_{}--{}",
            span.start.day(),
            span.start.clock(),
            span.end.clock()
        ))
    }

    pub fn entity(display_name: &str) -> NodeId {
        NodeId(format!("entity_{display_name}"))
    }

    pub fn triple(snapshot: Timestamp, ordinal: usize) -> NodeId {
        NodeId(format!("triple_DAY{}_{}_{ordinal:02}", snapshot.day(), snapshot.clock()))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl core::borrow::Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.into())
    }
}

/// Dense index of a node inside one [`MemoryGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeIx(pub u32);

impl NodeIx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Episode,
    VisualClip,
    Entity,
    SemanticTriple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub granularity: Granularity,
    pub span: TimeSpan,
    pub caption: String,
    pub embedding: Vec<f32>,
}

/// Frames of one 30-second window. Carries no text embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualClip {
    pub span: TimeSpan,
    pub embedding: Vec<f32>,
    /// Frame references (manifest paths) rendered as visual evidence.
    pub frames: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticTriple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub snapshot: Timestamp,
    /// Snapshot of the consolidation that superseded this triple.
    pub tombstoned_by: Option<Timestamp>,
    pub embedding: Vec<f32>,
}

impl SemanticTriple {
    pub fn render(&self) -> String {
        format!("({}, {}, {})", self.subject, self.predicate, self.object)
    }

    pub fn active_at(&self, t: Timestamp) -> bool {
        self.snapshot <= t && self.tombstoned_by.is_none_or(|s| s > t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeBody {
    Episode(Episode),
    VisualClip(VisualClip),
    Entity(Entity),
    Triple(SemanticTriple),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: NodeId,
    pub body: NodeBody,
}

impl GraphNode {
    pub fn kind(&self) -> NodeKind {
        match self.body {
            NodeBody::Episode(_) => NodeKind::Episode,
            NodeBody::VisualClip(_) => NodeKind::VisualClip,
            NodeBody::Entity(_) => NodeKind::Entity,
            NodeBody::Triple(_) => NodeKind::SemanticTriple,
        }
    }

    pub fn granularity(&self) -> Option<Granularity> {
        match &self.body {
            NodeBody::Episode(e) => Some(e.granularity),
            _ => None,
        }
    }

    pub fn span(&self) -> Option<TimeSpan> {
        match &self.body {
            NodeBody::Episode(e) => Some(e.span),
            NodeBody::VisualClip(c) => Some(c.span),
            _ => None,
        }
    }

    /// Episode caption or rendered triple.
    pub fn text(&self) -> Option<String> {
        match &self.body {
            NodeBody::Episode(e) => Some(e.caption.clone()),
            NodeBody::Triple(t) => Some(t.render()),
            _ => None,
        }
    }

    pub fn text_embedding(&self) -> Option<&[f32]> {
        match &self.body {
            NodeBody::Episode(e) => Some(&e.embedding),
            NodeBody::Triple(t) => Some(&t.embedding),
            _ => None,
        }
    }

    pub fn visual_embedding(&self) -> Option<&[f32]> {
        match &self.body {
            NodeBody::VisualClip(c) => Some(&c.embedding),
            _ => None,
        }
    }

    pub fn as_episode(&self) -> Option<&Episode> {
        match &self.body {
            NodeBody::Episode(e) => Some(e),
            _ => None,
        }
    }

    pub fn as_clip(&self) -> Option<&VisualClip> {
        match &self.body {
            NodeBody::VisualClip(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_triple(&self) -> Option<&SemanticTriple> {
        match &self.body {
            NodeBody::Triple(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_entity(&self) -> Option<&Entity> {
        match &self.body {
            NodeBody::Entity(e) => Some(e),
            _ => None,
        }
    }

    /// Time used to order this node on the timeline: span start for
    /// episodes and clips, snapshot for triples.
    pub fn anchor_time(&self) -> Option<Timestamp> {
        match &self.body {
            NodeBody::Episode(e) => Some(e.span.start),
            NodeBody::VisualClip(c) => Some(c.span.start),
            NodeBody::Triple(t) => Some(t.snapshot),
            NodeBody::Entity(_) => None,
        }
    }
}

/// Which side of a triple an entity sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Subject,
    Object,
}

/// Whether a containment edge links adjacent layers or skips from 1 h to 30 s.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Layer {
    Adjacent,
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    /// Entity -> 30 s episode naming it.
    MentionedIn,
    /// 30 s episode -- visual clip of the same window.
    CoClip,
    /// Entity -> visual clip, shortcut for mentioned_in -> co_clip.
    AppearedIn,
    /// Entity -> triple it appears in.
    HasProperty(Role),
    /// Adjacent same-granularity episodes.
    TemporalNext,
    /// Coarse episode -> finer episode it covers.
    Contains(Layer),
}

impl EdgeKind {
    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::MentionedIn => "mentioned_in",
            EdgeKind::CoClip => "co_clip",
            EdgeKind::AppearedIn => "appeared_in",
            EdgeKind::HasProperty(_) => "has_property",
            EdgeKind::TemporalNext => "temporal_next",
            EdgeKind::Contains(_) => "contains",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EdgeWeight {
    Weight(f64),
    /// The edge is not created.
    Dropped,
}

impl EdgeWeight {
    pub fn value(self) -> Option<f64> {
        match self {
            EdgeWeight::Weight(w) => Some(w),
            EdgeWeight::Dropped => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EdgeWeightError {
    #[error("temporal_next requires a time gap")]
    MissingGap,
    #[error("{0} does not take a time gap")]
    UnexpectedGap(&'static str),
}

/// Weight schedule of every edge kind. `gap_secs` is the pause between two
/// adjacent same-granularity windows and must be given exactly for
/// `temporal_next`.
pub fn edge_weight(kind: EdgeKind, gap_secs: Option<u64>) -> Result<EdgeWeight, EdgeWeightError> {
    if kind != EdgeKind::TemporalNext && gap_secs.is_some() {
        return Err(EdgeWeightError::UnexpectedGap(kind.name()));
    }
    let w = match kind {
        EdgeKind::CoClip | EdgeKind::MentionedIn => 1.0,
        EdgeKind::HasProperty(Role::Subject) => 1.0,
        EdgeKind::HasProperty(Role::Object) => 0.5,
        EdgeKind::AppearedIn => 0.8,
        EdgeKind::Contains(Layer::Adjacent) => 1.0,
        EdgeKind::Contains(Layer::Skip) => 0.5,
        EdgeKind::TemporalNext => {
            let gap = gap_secs.ok_or(EdgeWeightError::MissingGap)?;
            if gap > TEMPORAL_CUTOFF_SECS {
                return Ok(EdgeWeight::Dropped);
            }
            1.0 / (gap as f64 + 1.0)
        }
    };
    Ok(EdgeWeight::Weight(w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    pub from: NodeIx,
    pub to: NodeIx,
    pub weight: f64,
}

impl Edge {
    pub fn other(&self, ix: NodeIx) -> NodeIx {
        if self.from == ix {
            self.to
        } else {
            self.from
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("edge {index} references missing node {node}")]
    DanglingEdge { index: usize, node: u32 },
    #[error("edge {index} ({kind}) joins {from} and {to}, which the schema forbids")]
    SchemaViolation { index: usize, kind: &'static str, from: NodeId, to: NodeId },
    #[error("edge {index} has weight {weight} outside (0, 1]")]
    BadWeight { index: usize, weight: f64 },
    #[error("lexical index references a node that is not a 30 s episode: {0}")]
    BadPosting(NodeId),
}

/// Immutable heterogeneous graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<u32>>,
    by_id: BTreeMap<NodeId, NodeIx>,
    entity_index: BTreeMap<String, NodeIx>,
    lexical: LexicalIndex,
    schema_version: u32,
}

fn check_endpoints(kind: EdgeKind, from: &GraphNode, to: &GraphNode) -> bool {
    use Granularity::*;
    match kind {
        EdgeKind::MentionedIn => {
            from.kind() == NodeKind::Entity && to.granularity() == Some(Sec30)
        }
        EdgeKind::CoClip => {
            from.granularity() == Some(Sec30) && to.kind() == NodeKind::VisualClip
        }
        EdgeKind::AppearedIn => {
            from.kind() == NodeKind::Entity && to.kind() == NodeKind::VisualClip
        }
        EdgeKind::HasProperty(_) => {
            from.kind() == NodeKind::Entity && to.kind() == NodeKind::SemanticTriple
        }
        EdgeKind::TemporalNext => match (from.granularity(), to.granularity()) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        },
        EdgeKind::Contains(Layer::Adjacent) => match (from.granularity(), to.granularity()) {
            (Some(a), Some(b)) => a.finer() == Some(b),
            _ => false,
        },
        EdgeKind::Contains(Layer::Skip) => {
            from.granularity() == Some(Hour1) && to.granularity() == Some(Sec30)
        }
    }
}

impl MemoryGraph {
    /// Assembles and validates a graph. Every edge endpoint must exist, obey
    /// the schema for its kind, and carry a weight in (0, 1].
    pub fn from_parts(
        nodes: Vec<GraphNode>,
        edges: Vec<Edge>,
        lexical: LexicalIndex,
    ) -> Result<Self, GraphError> {
        let mut by_id = BTreeMap::new();
        let mut entity_index = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            let ix = NodeIx(i as u32);
            if by_id.insert(node.id.clone(), ix).is_some() {
                return Err(GraphError::DuplicateNode(node.id.clone()));
            }
            if let NodeBody::Entity(e) = &node.body {
                entity_index.insert(canonical_key(&e.name), ix);
            }
        }
        let mut adjacency = alloc::vec![Vec::new(); nodes.len()];
        for (index, edge) in edges.iter().enumerate() {
            for ix in [edge.from, edge.to] {
                if ix.index() >= nodes.len() {
                    return Err(GraphError::DanglingEdge { index, node: ix.0 });
                }
            }
            let (from, to) = (&nodes[edge.from.index()], &nodes[edge.to.index()]);
            if !check_endpoints(edge.kind, from, to) {
                return Err(GraphError::SchemaViolation {
                    index,
                    kind: edge.kind.name(),
                    from: from.id.clone(),
                    to: to.id.clone(),
                });
            }
            if !(edge.weight > 0.0 && edge.weight <= 1.0) {
                return Err(GraphError::BadWeight { index, weight: edge.weight });
            }
            adjacency[edge.from.index()].push(index as u32);
            adjacency[edge.to.index()].push(index as u32);
        }
        for doc in lexical.doc_nodes() {
            let ok = nodes
                .get(doc.index())
                .is_some_and(|n| n.granularity() == Some(Granularity::Sec30));
            if !ok {
                let id = nodes.get(doc.index()).map_or_else(
                    || NodeId(format!("#{}", doc.0)),
                    |n| n.id.clone(),
                );
                return Err(GraphError::BadPosting(id));
            }
        }
        Ok(MemoryGraph {
            nodes,
            edges,
            adjacency,
            by_id,
            entity_index,
            lexical,
            schema_version: SCHEMA_VERSION,
        })
    }

    pub fn empty() -> Self {
        Self::from_parts(Vec::new(), Vec::new(), LexicalIndex::default())
            .expect("empty graph is valid")
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, ix: NodeIx) -> &GraphNode {
        &self.nodes[ix.index()]
    }

    pub fn id(&self, ix: NodeIx) -> &NodeId {
        &self.nodes[ix.index()].id
    }

    pub fn lookup(&self, id: &str) -> Option<NodeIx> {
        self.by_id.get(id).copied()
    }

    /// Entity node for a canonical (case-folded) name.
    pub fn entity(&self, canonical_name: &str) -> Option<NodeIx> {
        self.entity_index.get(&canonical_key(canonical_name)).copied()
    }

    pub fn lexical(&self) -> &LexicalIndex {
        &self.lexical
    }

    pub fn indices(&self) -> impl Iterator<Item = NodeIx> + '_ {
        (0..self.nodes.len() as u32).map(NodeIx)
    }

    /// Incident edges of `ix` in both directions, with the opposite endpoint.
    pub fn incident(&self, ix: NodeIx) -> impl Iterator<Item = (&Edge, NodeIx)> + '_ {
        self.adjacency[ix.index()].iter().map(move |&e| {
            let edge = &self.edges[e as usize];
            (edge, edge.other(ix))
        })
    }

    /// Visual clips co-clipped with a 30 s episode.
    pub fn co_clips(&self, episode: NodeIx) -> impl Iterator<Item = NodeIx> + '_ {
        self.incident(episode)
            .filter(|(e, _)| e.kind == EdgeKind::CoClip)
            .map(|(_, other)| other)
    }

    /// 30 s episode a visual clip is co-clipped with.
    pub fn clip_episode(&self, clip: NodeIx) -> Option<NodeIx> {
        self.co_clips(clip).next()
    }

    pub fn count_nodes(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind() == kind).count()
    }

    pub fn count_edges(&self, name: &str) -> usize {
        self.edges.iter().filter(|e| e.kind.name() == name).count()
    }
}
