//! Narrative memory chains and their two-tier online injection.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::text::{cosine, KeywordPattern};
use crate::time::{Granularity, TimeSpan, Timestamp};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicFact {
    pub time: Timestamp,
    pub fact: String,
}

/// Dated biography of one entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicChain {
    pub entity: String,
    pub facts: Vec<TopicFact>,
    /// Embedding of [`TopicChain::content`].
    #[serde(default)]
    pub embedding: Vec<f32>,
}

impl TopicChain {
    /// Sorts facts by time and drops facts that would render identically.
    /// Returns `None` for an empty fact list.
    pub fn new(entity: impl Into<String>, mut facts: Vec<TopicFact>) -> Option<Self> {
        facts.sort_by(|a, b| a.time.cmp(&b.time).then_with(|| a.fact.cmp(&b.fact)));
        facts.dedup_by(|b, a| a.time.clock_minutes() == b.time.clock_minutes()
            && a.time.day() == b.time.day()
            && a.fact == b.fact);
        if facts.is_empty() {
            return None;
        }
        Some(TopicChain { entity: entity.into(), facts, embedding: Vec::new() })
    }

    /// Facts joined by newlines, the text the chain embedding is computed on.
    pub fn content(&self) -> String {
        let parts: Vec<&str> = self.facts.iter().map(|f| f.fact.as_str()).collect();
        parts.join("\n")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventStep {
    pub start: Timestamp,
    pub end: Timestamp,
    pub description: String,
}

impl EventStep {
    pub fn span(&self) -> TimeSpan {
        TimeSpan::new(self.start, self.end)
    }
}

/// Dated multi-step activity arc.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventChain {
    pub name: String,
    pub key_entities: Vec<String>,
    pub steps: Vec<EventStep>,
    #[serde(default)]
    pub embedding: Vec<f32>,
}

impl EventChain {
    /// Sorts steps by start and drops steps whose start is after their end.
    pub fn new(name: impl Into<String>, key_entities: Vec<String>, mut steps: Vec<EventStep>) -> Self {
        steps.retain(|s| s.start <= s.end);
        steps.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.end.cmp(&b.end)));
        EventChain { name: name.into(), key_entities, steps, embedding: Vec::new() }
    }

    pub fn content(&self) -> String {
        let parts: Vec<&str> = self.steps.iter().map(|s| s.description.as_str()).collect();
        parts.join("\n")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChainRef {
    Topic(usize),
    Event(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStore {
    pub topics: Vec<TopicChain>,
    pub events: Vec<EventChain>,
}

impl ChainStore {
    pub fn is_empty(&self) -> bool {
        self.topics.is_empty() && self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.topics.len() + self.events.len()
    }

    /// Topic chains first, then event chains, each in store order.
    pub fn refs(&self) -> impl Iterator<Item = ChainRef> {
        (0..self.topics.len())
            .map(ChainRef::Topic)
            .chain((0..self.events.len()).map(ChainRef::Event))
    }

    pub fn name(&self, chain: ChainRef) -> &str {
        match chain {
            ChainRef::Topic(i) => &self.topics[i].entity,
            ChainRef::Event(i) => &self.events[i].name,
        }
    }

    pub fn embedding(&self, chain: ChainRef) -> &[f32] {
        match chain {
            ChainRef::Topic(i) => &self.topics[i].embedding,
            ChainRef::Event(i) => &self.events[i].embedding,
        }
    }

    /// Names matched against the query in tier 1.
    pub fn keywords(&self, chain: ChainRef) -> Vec<&str> {
        match chain {
            ChainRef::Topic(i) => alloc::vec![self.topics[i].entity.as_str()],
            ChainRef::Event(i) => self.events[i].key_entities.iter().map(String::as_str).collect(),
        }
    }

    /// Every fact or step of a chain, unfiltered.
    pub fn facts(&self, chain: ChainRef) -> Vec<NarrativeFact> {
        match chain {
            ChainRef::Topic(i) => {
                let c = &self.topics[i];
                c.facts
                    .iter()
                    .enumerate()
                    .map(|(j, f)| NarrativeFact {
                        id: format!("topic:{}#{j}", c.entity),
                        chain,
                        label: c.entity.clone(),
                        start: f.time,
                        end: None,
                        text: f.fact.clone(),
                    })
                    .collect()
            }
            ChainRef::Event(i) => {
                let c = &self.events[i];
                c.steps
                    .iter()
                    .enumerate()
                    .map(|(j, s)| NarrativeFact {
                        id: format!("event:{}#{j}", c.name),
                        chain,
                        label: c.name.clone(),
                        start: s.start,
                        end: Some(s.end),
                        text: s.description.clone(),
                    })
                    .collect()
            }
        }
    }
}

/// One topic fact or event step ready for the context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativeFact {
    /// Stable across rounds, used for dedup.
    pub id: String,
    pub chain: ChainRef,
    pub label: String,
    pub start: Timestamp,
    /// Present for event steps.
    pub end: Option<Timestamp>,
    pub text: String,
}

impl NarrativeFact {
    pub fn is_topic(&self) -> bool {
        matches!(self.chain, ChainRef::Topic(_))
    }

    pub fn render(&self) -> String {
        match self.end {
            None => format!("[Topic: {}] [{}] {}", self.label, self.start.display_minutes(), self.text),
            Some(end) => format!(
                "[Event: {}] [DAY{} {} -- {}] {}",
                self.label,
                self.start.day(),
                self.start.clock(),
                end.clock(),
                self.text
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub topic_min_hits: usize,
    pub storyline_min_hits: usize,
    pub cosine_threshold: f64,
    pub max_chains: usize,
    pub dedup_margin_secs: u64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            topic_min_hits: 1,
            storyline_min_hits: 1,
            cosine_threshold: 0.7,
            max_chains: 3,
            dedup_margin_secs: 60,
        }
    }
}

/// A retained episode as seen by injection.
#[derive(Clone, Copy, Debug)]
pub struct AnchorEpisode<'a> {
    pub granularity: Granularity,
    pub span: TimeSpan,
    pub caption: &'a str,
}

/// Chains evidenced by this round's retrieval, in store order.
pub fn anchor_candidates(
    retrieved: &[AnchorEpisode<'_>],
    store: &ChainStore,
    config: &InjectionConfig,
) -> Vec<ChainRef> {
    let sec30: Vec<&AnchorEpisode<'_>> =
        retrieved.iter().filter(|e| e.granularity == Granularity::Sec30).collect();
    store
        .refs()
        .filter(|&chain| match chain {
            ChainRef::Topic(i) => {
                let pattern = KeywordPattern::new(&store.topics[i].entity);
                let hits = sec30.iter().filter(|e| pattern.matches(e.caption)).count();
                hits >= config.topic_min_hits.max(1)
            }
            ChainRef::Event(i) => {
                let hits = store.events[i]
                    .steps
                    .iter()
                    .filter(|s| retrieved.iter().any(|e| s.span().contains_span(&e.span)))
                    .count();
                hits >= config.storyline_min_hits.max(1)
            }
        })
        .collect()
}

/// Candidates with a keyword that matches the query, in candidate order,
/// at most `budget`.
pub fn tier1_keyword(query: &str, candidates: &[ChainRef], store: &ChainStore, budget: usize) -> Vec<ChainRef> {
    let tokens = crate::text::tokenize(query);
    candidates
        .iter()
        .copied()
        .filter(|&c| {
            store
                .keywords(c)
                .into_iter()
                .any(|k| KeywordPattern::new(k).matches_tokens(&tokens))
        })
        .take(budget)
        .collect()
}

/// Candidates whose content embedding reaches `threshold` cosine with the
/// query, best first, at most `budget`.
pub fn tier2_semantic(
    query_embedding: &[f32],
    candidates: &[ChainRef],
    store: &ChainStore,
    threshold: f64,
    budget: usize,
) -> Vec<(ChainRef, f64)> {
    let mut scored: Vec<(ChainRef, f64)> = candidates
        .iter()
        .map(|&c| (c, cosine(query_embedding, store.embedding(c))))
        .filter(|&(_, s)| s >= threshold)
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    scored.truncate(budget);
    scored
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Injection {
    pub anchored: Vec<ChainRef>,
    pub tier1: Vec<ChainRef>,
    pub tier2: Vec<(ChainRef, f64)>,
    /// Topic facts first, then event steps; chronological within each.
    pub facts: Vec<NarrativeFact>,
}

impl Injection {
    pub fn admitted(&self) -> impl Iterator<Item = ChainRef> + '_ {
        self.tier1.iter().copied().chain(self.tier2.iter().map(|&(c, _)| c))
    }
}

fn covered(fact: &NarrativeFact, retrieved: &[AnchorEpisode<'_>], margin: u64) -> bool {
    let range = TimeSpan::new(fact.start, fact.end.unwrap_or(fact.start));
    retrieved.iter().any(|e| e.span.widened(margin).contains_span(&range))
}

/// Anchoring, tier 1, tier 2, then the time filter and the dedup against
/// retrieved episode envelopes.
pub fn inject(
    query: &str,
    query_embedding: &[f32],
    t: Timestamp,
    retrieved: &[AnchorEpisode<'_>],
    store: &ChainStore,
    config: &InjectionConfig,
) -> Injection {
    let anchored = anchor_candidates(retrieved, store, config);
    let tier1 = tier1_keyword(query, &anchored, store, config.max_chains);
    let rest: Vec<ChainRef> = anchored.iter().copied().filter(|c| !tier1.contains(c)).collect();
    let budget = config.max_chains.saturating_sub(tier1.len());
    let tier2 = tier2_semantic(query_embedding, &rest, store, config.cosine_threshold, budget);
    let mut topic = Vec::new();
    let mut event = Vec::new();
    for chain in tier1.iter().copied().chain(tier2.iter().map(|&(c, _)| c)) {
        let keep = store
            .facts(chain)
            .into_iter()
            .filter(|f| f.start <= t && !covered(f, retrieved, config.dedup_margin_secs));
        match chain {
            ChainRef::Topic(_) => topic.extend(keep),
            ChainRef::Event(_) => event.extend(keep),
        }
    }
    topic.sort_by(|a, b| a.start.cmp(&b.start));
    event.sort_by(|a, b| a.start.cmp(&b.start));
    topic.extend(event);
    Injection { anchored, tier1, tier2, facts: topic }
}
