//! Core of the multimodal memory graph.
//!
//! Everything here is allocation-only and IO-free so it can run inside
//! whatever host loads the graph: the typed heterogeneous graph and its
//! time-filtered views, the offline builder over in-memory artefacts, the
//! BM25 caption index, cross-modal personalized PageRank retrieval with
//! quota filtering, narrative-chain injection, and the round/context
//! bookkeeping used by the agentic loop.
//!
//! Persistence, model providers and the CLI live in the `mmg` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bm25;
pub mod builder;
pub mod chains;
pub mod context;
pub mod graph;
pub mod ppr;
pub mod text;
pub mod time;
pub mod view;

pub use bm25::{Bm25Params, LexicalIndex};
pub use builder::{
    build_graph, ArtefactBundle, BuildConfig, BuildError, BuildOutput, BuildWarning, CaptionRow,
    GraphBuilder, MentionRow, TripleRow, VisualRow,
};
pub use chains::{
    AnchorEpisode, ChainRef, ChainStore, EventChain, EventStep, InjectionConfig, Injection, NarrativeFact, TopicChain,
    TopicFact,
};
pub use context::{ContextItem, Decision, MergedContext, RoundRecord};
pub use graph::{
    edge_weight, Edge, EdgeKind, EdgeWeight, GraphError, GraphNode, Layer, MemoryGraph, NodeBody,
    NodeId, NodeIx, NodeKind, Role, SCHEMA_VERSION,
};
pub use ppr::{NoSeed, PprConfig, Query, Quotas, RetainClass, Retained, Retrieval};
pub use time::{Granularity, TimeSpan, Timestamp};
pub use view::TimeView;
