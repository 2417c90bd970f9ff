//! Cross-modal retrieval pass over a [`TimeView`]: seed channels, reset
//! mixing, weighted undirected personalized PageRank, cosine rerank and
//! per-class quota filtering.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::graph::{MemoryGraph, NodeIx, NodeKind};
use crate::text::cosine;
use crate::time::Granularity;
use crate::view::TimeView;

/// Per-class retention caps applied after reranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quotas {
    pub sec30: usize,
    pub min3: usize,
    pub min10: usize,
    pub hour1: usize,
    pub semantic: usize,
    pub entity: usize,
    pub total: usize,
}

impl Default for Quotas {
    fn default() -> Self {
        Quotas { sec30: 8, min3: 4, min10: 3, hour1: 0, semantic: 5, entity: 3, total: 16 }
    }
}

impl Quotas {
    pub fn cap(&self, class: RetainClass) -> usize {
        match class {
            RetainClass::Episode(Granularity::Sec30) => self.sec30,
            RetainClass::Episode(Granularity::Min3) => self.min3,
            RetainClass::Episode(Granularity::Min10) => self.min10,
            RetainClass::Episode(Granularity::Hour1) => self.hour1,
            RetainClass::Semantic => self.semantic,
            RetainClass::Entity => self.entity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PprConfig {
    /// Damping factor d.
    pub damping: f64,
    /// Caption-embedding weight against BM25 inside the text channel.
    pub alpha: f64,
    /// Visual weight against text in the reset vector.
    pub gamma: f64,
    pub channel_top_k: usize,
    /// Error bound on the L1 distance to the fixed point.
    pub tol: f64,
    pub max_iter: usize,
    pub quotas: Quotas,
}

impl Default for PprConfig {
    fn default() -> Self {
        PprConfig {
            damping: 0.85,
            alpha: 0.7,
            gamma: 0.3,
            channel_top_k: 5,
            tol: 1e-8,
            max_iter: 200,
            quotas: Quotas::default(),
        }
    }
}

/// Every seed channel was empty; there is nothing to personalize on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("no seed node has a positive score")]
pub struct NoSeed;

pub type Scores = Vec<(NodeIx, f64)>;

/// Per-channel seed scores, each already truncated to the channel top-K.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedBundle {
    pub cap: Scores,
    pub bm25: Scores,
    pub vis: Scores,
}

/// Query-side inputs of one retrieval pass.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub text: &'a str,
    pub text_embedding: &'a [f32],
    /// Visual-side encoding of the query text; `None` disables the channel.
    pub visual_embedding: Option<&'a [f32]>,
}

fn sort_scores(graph: &MemoryGraph, scores: &mut Scores) {
    scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| graph.id(a.0).cmp(graph.id(b.0)))
    });
}

/// Keeps the `k` best strictly positive scores.
pub fn top_k(graph: &MemoryGraph, mut scores: Scores, k: usize) -> Scores {
    scores.retain(|&(_, s)| s > 0.0);
    sort_scores(graph, &mut scores);
    scores.truncate(k);
    scores
}

/// Divides by the channel maximum so the best node scores 1.
pub fn max_normalize(scores: &[(NodeIx, f64)]) -> Scores {
    let max = scores.iter().map(|&(_, s)| s).fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    scores.iter().map(|&(n, s)| (n, s / max)).collect()
}

/// Scores the three seed channels on the active subgraph. Negative cosines
/// contribute nothing.
pub fn compute_seeds(view: &TimeView<'_>, query: &Query<'_>, config: &PprConfig) -> SeedBundle {
    let graph = view.graph();
    let mut cap = Vec::new();
    let mut vis = Vec::new();
    for ix in view.active_nodes() {
        let node = graph.node(ix);
        if let Some(e) = node.text_embedding() {
            cap.push((ix, cosine(query.text_embedding, e).max(0.0)));
        }
        if let (Some(q), Some(e)) = (query.visual_embedding, node.visual_embedding()) {
            vis.push((ix, cosine(q, e).max(0.0)));
        }
    }
    let bm25 = graph
        .lexical()
        .scores(query.text)
        .into_iter()
        .filter(|&(ix, _)| view.is_active(ix))
        .collect();
    let k = config.channel_top_k;
    SeedBundle {
        cap: top_k(graph, cap, k),
        bm25: top_k(graph, bm25, k),
        vis: top_k(graph, vis, k),
    }
}

/// s_text = alpha * maxnorm(cap) + (1 - alpha) * maxnorm(bm25).
pub fn text_seed(seeds: &SeedBundle, alpha: f64) -> BTreeMap<NodeIx, f64> {
    let mut out = BTreeMap::new();
    for (n, s) in max_normalize(&seeds.cap) {
        *out.entry(n).or_insert(0.0) += alpha * s;
    }
    for (n, s) in max_normalize(&seeds.bm25) {
        *out.entry(n).or_insert(0.0) += (1.0 - alpha) * s;
    }
    out
}

fn normalized(graph: &MemoryGraph, mass: BTreeMap<NodeIx, f64>) -> Result<Vec<f64>, NoSeed> {
    let total: f64 = mass.values().sum();
    if !(total > 0.0) {
        return Err(NoSeed);
    }
    let mut r = vec![0.0; graph.node_count()];
    for (n, m) in mass {
        r[n.index()] = m / total;
    }
    Ok(r)
}

/// r = gamma * maxnorm(s_vis) + (1 - gamma) * s_text, normalized to sum 1.
/// Returned densely, indexed by [`NodeIx`].
pub fn build_reset(
    view: &TimeView<'_>,
    s_text: &BTreeMap<NodeIx, f64>,
    s_vis: &[(NodeIx, f64)],
    gamma: f64,
) -> Result<Vec<f64>, NoSeed> {
    let mut mass = BTreeMap::new();
    for (&n, &s) in s_text {
        *mass.entry(n).or_insert(0.0) += (1.0 - gamma) * s;
    }
    for (n, s) in max_normalize(s_vis) {
        *mass.entry(n).or_insert(0.0) += gamma * s;
    }
    mass.retain(|n, m| *m > 0.0 && view.is_active(*n));
    normalized(view.graph(), mass)
}

/// Reset vector from the text channel alone.
pub fn build_text_reset(
    view: &TimeView<'_>,
    s_text: &BTreeMap<NodeIx, f64>,
) -> Result<Vec<f64>, NoSeed> {
    let mass = s_text
        .iter()
        .filter(|(n, m)| **m > 0.0 && view.is_active(**n))
        .map(|(&n, &m)| (n, m))
        .collect();
    normalized(view.graph(), mass)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PprOutcome {
    /// Stationary probabilities indexed by [`NodeIx`]; zero off the view.
    pub pi: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iter` was reached before the error bound fell below `tol`.
    pub converged: bool,
}

/// Power iteration of pi = d * A^T pi + (1 - d) * r on the active
/// subgraph. Each node spreads its mass over its active incident edges in
/// proportion to their weights; nodes without any return it to r.
pub fn run_ppr(view: &TimeView<'_>, reset: &[f64], config: &PprConfig) -> PprOutcome {
    let graph = view.graph();
    let n = graph.node_count();
    let d = config.damping;
    let out_weight: Vec<f64> = graph
        .indices()
        .map(|ix| view.incident(ix).map(|(e, _)| e.weight).sum())
        .collect();
    let mut pi: Vec<f64> = reset.to_vec();
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    let bound_factor = if d < 1.0 { d / (1.0 - d) } else { f64::INFINITY };
    while iterations < config.max_iter {
        iterations += 1;
        next.iter_mut().for_each(|x| *x = 0.0);
        let mut dangling = 0.0;
        for ix in view.active_nodes() {
            let mass = pi[ix.index()];
            if mass == 0.0 {
                continue;
            }
            let w = out_weight[ix.index()];
            if w <= 0.0 {
                dangling += mass;
                continue;
            }
            for (edge, other) in view.incident(ix) {
                next[other.index()] += d * mass * edge.weight / w;
            }
        }
        let teleport = (1.0 - d) + d * dangling;
        for (x, &r) in next.iter_mut().zip(reset) {
            *x += teleport * r;
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        core::mem::swap(&mut pi, &mut next);
        if bound_factor * delta <= config.tol {
            converged = true;
            break;
        }
    }
    let total: f64 = pi.iter().sum();
    if total > 0.0 {
        pi.iter_mut().for_each(|x| *x /= total);
    }
    PprOutcome { pi, iterations, converged }
}

/// score(v) = pi(v) * (cos(q, e_v) + 1) / 2, with cos = 0 for nodes that
/// carry no text embedding. Only active nodes with pi > 0 are listed.
pub fn rerank(view: &TimeView<'_>, pi: &[f64], query_embedding: &[f32]) -> Scores {
    let graph = view.graph();
    let mut out: Scores = view
        .active_nodes()
        .filter(|ix| pi[ix.index()] > 0.0)
        .map(|ix| {
            let cos = graph.node(ix).text_embedding().map_or(0.0, |e| cosine(query_embedding, e));
            (ix, pi[ix.index()] * (cos + 1.0) / 2.0)
        })
        .collect();
    sort_scores(graph, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RetainClass {
    Episode(Granularity),
    Semantic,
    Entity,
}

/// One node kept by the quota filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Retained {
    pub node: NodeIx,
    pub class: RetainClass,
    pub score: f64,
    /// Set when the node was retained on behalf of a directly hit clip.
    pub via_clip: Option<NodeIx>,
}

/// Greedy scan of `reranked` keeping a node while its class quota and the
/// total cap allow. A visual clip stands in for its co-clip 30 s episode.
pub fn quota_filter(view: &TimeView<'_>, reranked: &[(NodeIx, f64)], quotas: &Quotas) -> Vec<Retained> {
    let graph = view.graph();
    let mut used: BTreeMap<RetainClass, usize> = BTreeMap::new();
    let mut seen = vec![false; graph.node_count()];
    let mut out = Vec::new();
    for &(ix, score) in reranked {
        if out.len() >= quotas.total {
            break;
        }
        let node = graph.node(ix);
        let (target, via_clip) = match node.kind() {
            NodeKind::VisualClip => match graph.clip_episode(ix) {
                Some(ep) if view.is_active(ep) => (ep, Some(ix)),
                _ => continue,
            },
            _ => (ix, None),
        };
        let class = match graph.node(target).kind() {
            NodeKind::Episode => {
                RetainClass::Episode(graph.node(target).granularity().expect("episode"))
            }
            NodeKind::SemanticTriple => RetainClass::Semantic,
            NodeKind::Entity => RetainClass::Entity,
            NodeKind::VisualClip => continue,
        };
        if seen[target.index()] {
            continue;
        }
        let count = used.entry(class).or_insert(0);
        if *count >= quotas.cap(class) {
            continue;
        }
        *count += 1;
        seen[target.index()] = true;
        out.push(Retained { node: target, class, score, via_clip });
    }
    out
}

/// Full record of one retrieval pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub seeds: SeedBundle,
    pub reset: Vec<f64>,
    pub ppr: PprOutcome,
    pub reranked: Scores,
    pub retained: Vec<Retained>,
}

/// Seeds, reset, PPR, rerank and quota filter in one call.
pub fn retrieve(view: &TimeView<'_>, query: &Query<'_>, config: &PprConfig) -> Result<Retrieval, NoSeed> {
    let seeds = compute_seeds(view, query, config);
    let s_text = text_seed(&seeds, config.alpha);
    let reset = build_reset(view, &s_text, &seeds.vis, config.gamma)?;
    Ok(finish(view, query, config, seeds, reset))
}

/// Same pass with the reset built from the text channel only.
pub fn retrieve_text_only(
    view: &TimeView<'_>,
    query: &Query<'_>,
    config: &PprConfig,
) -> Result<Retrieval, NoSeed> {
    let seeds = compute_seeds(view, query, config);
    let s_text = text_seed(&seeds, config.alpha);
    let reset = build_text_reset(view, &s_text)?;
    Ok(finish(view, query, config, seeds, reset))
}

fn finish(
    view: &TimeView<'_>,
    query: &Query<'_>,
    config: &PprConfig,
    seeds: SeedBundle,
    reset: Vec<f64>,
) -> Retrieval {
    let ppr = run_ppr(view, &reset, config);
    let reranked = rerank(view, &ppr.pi, query.text_embedding);
    let retained = quota_filter(view, &reranked, &config.quotas);
    Retrieval { seeds, reset, ppr, reranked, retained }
}
