//! BM25 inverted index over 30-second captions.
//!
//! score(d, q) = sum over distinct query terms t present in d of
//!   idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
//! with idf(t) = ln(1 + (N - n_t + 0.5) / (n_t + 0.5)), which keeps every
//! score non-negative.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::graph::{NodeId, NodeIx};
use crate::text::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Doc {
    node: NodeIx,
    id: NodeId,
    len: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexicalIndex {
    params: Bm25Params,
    docs: Vec<Doc>,
    /// term -> (doc ordinal, term frequency), doc ordinals ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    avg_doc_len: f64,
}

impl Default for LexicalIndex {
    fn default() -> Self {
        LexicalIndex {
            params: Bm25Params::default(),
            docs: Vec::new(),
            postings: BTreeMap::new(),
            avg_doc_len: 0.0,
        }
    }
}

impl LexicalIndex {
    /// Indexes `(node, id, caption)` triples. Empty captions count as
    /// zero-length documents.
    pub fn build<'a, I>(episodes: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = (NodeIx, &'a NodeId, &'a str)>,
    {
        let mut docs = Vec::new();
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut total_len = 0u64;
        for (ordinal, (node, id, text)) in episodes.into_iter().enumerate() {
            let tokens = tokenize(text);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for tok in &tokens {
                *tf.entry(tok.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((ordinal as u32, count));
            }
            total_len += tokens.len() as u64;
            docs.push(Doc { node, id: id.clone(), len: tokens.len() as u32 });
        }
        let avg_doc_len = if docs.is_empty() { 0.0 } else { total_len as f64 / docs.len() as f64 };
        LexicalIndex { params, docs, postings, avg_doc_len }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_nodes(&self) -> impl Iterator<Item = NodeIx> + '_ {
        self.docs.iter().map(|d| d.node)
    }

    pub fn doc_len(&self, node: NodeIx) -> Option<u32> {
        self.docs.iter().find(|d| d.node == node).map(|d| d.len)
    }

    /// Posting list of a (case-folded) term as `(node, tf)`.
    pub fn postings(&self, term: &str) -> Vec<(NodeIx, u32)> {
        self.postings
            .get(term)
            .map(|p| p.iter().map(|&(d, tf)| (self.docs[d as usize].node, tf)).collect())
            .unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    fn idf(&self, doc_freq: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = doc_freq as f64;
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    /// Scores every document sharing at least one query term, sorted by
    /// descending score with ties broken by node id.
    pub fn scores(&self, query: &str) -> Vec<(NodeIx, f64)> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let Bm25Params { k1, b } = self.params;
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for &(doc, tf) in list {
                let len = f64::from(self.docs[doc as usize].len);
                let norm = if self.avg_doc_len > 0.0 { len / self.avg_doc_len } else { 0.0 };
                let tf = f64::from(tf);
                let s = idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
                *acc.entry(doc).or_default() += s;
            }
        }
        let mut out: Vec<(u32, f64)> = acc.into_iter().collect();
        out.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.docs[a.0 as usize].id.cmp(&self.docs[b.0 as usize].id))
        });
        out.into_iter().map(|(d, s)| (self.docs[d as usize].node, s)).collect()
    }
}
