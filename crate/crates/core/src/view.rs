//! Query-time subgraph: the nodes visible at or before a query time, with
//! semantic triples collapsed to their latest non-tombstoned snapshot.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{Edge, GraphNode, MemoryGraph, NodeBody, NodeIx};
use crate::time::Timestamp;

#[derive(Clone, Debug)]
pub struct TimeView<'g> {
    graph: &'g MemoryGraph,
    at: Timestamp,
    active: Vec<bool>,
    active_count: usize,
}

fn timed_active(node: &GraphNode, t: Timestamp) -> Option<bool> {
    match &node.body {
        NodeBody::Episode(e) => Some(e.span.start <= t),
        NodeBody::VisualClip(c) => Some(c.span.start <= t),
        NodeBody::Triple(tr) => Some(tr.active_at(t)),
        NodeBody::Entity(_) => None,
    }
}

impl<'g> TimeView<'g> {
    /// Filters `graph` to query time `t` (use [`Timestamp::END`] for no limit).
    pub fn new(graph: &'g MemoryGraph, t: Timestamp) -> Self {
        let mut active = vec![false; graph.node_count()];
        for ix in graph.indices() {
            if let Some(a) = timed_active(graph.node(ix), t) {
                active[ix.index()] = a;
            }
        }
        // Entities are bridges: visible once any neighbour is.
        for ix in graph.indices() {
            if graph.node(ix).as_entity().is_some() {
                active[ix.index()] = graph.incident(ix).any(|(_, other)| active[other.index()]);
            }
        }
        let active_count = active.iter().filter(|&&a| a).count();
        TimeView { graph, at: t, active, active_count }
    }

    pub fn graph(&self) -> &'g MemoryGraph {
        self.graph
    }

    pub fn query_time(&self) -> Timestamp {
        self.at
    }

    pub fn is_active(&self, ix: NodeIx) -> bool {
        self.active[ix.index()]
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn active_nodes(&self) -> impl Iterator<Item = NodeIx> + '_ {
        self.graph.indices().filter(move |&ix| self.active[ix.index()])
    }

    pub fn edge_active(&self, edge: &Edge) -> bool {
        self.active[edge.from.index()] && self.active[edge.to.index()]
    }

    /// Active incident edges of an active node.
    pub fn incident(&self, ix: NodeIx) -> impl Iterator<Item = (&'g Edge, NodeIx)> + '_ {
        let live = self.active[ix.index()];
        self.graph
            .incident(ix)
            .filter(move |(e, _)| live && self.edge_active(e))
    }

    pub fn active_edge_count(&self) -> usize {
        self.graph.edges().iter().filter(|e| self.edge_active(e)).count()
    }
}
