use mmg_core::chains::{inject, AnchorEpisode, Injection};
use mmg_core::text::{cosine, KeywordPattern};
use mmg_core::{
    ChainRef, ChainStore, EventChain, EventStep, Granularity, InjectionConfig, TimeSpan, Timestamp,
    TopicChain, TopicFact,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KEYS: [&str; 8] = ["marker", "box", "cake", "guitar", "flower", "hot pot", "laptop", "kitchen"];
const DAY: u64 = 86_400;

pub struct Fixture {
    pub store: ChainStore,
    pub captions: Vec<String>,
    pub spans: Vec<(Granularity, TimeSpan)>,
    pub query: String,
    pub query_embedding: Vec<f32>,
    pub t: Timestamp,
    pub config: InjectionConfig,
}

impl Fixture {
    pub fn retrieved(&self) -> Vec<AnchorEpisode<'_>> {
        self.spans
            .iter()
            .zip(&self.captions)
            .map(|(&(granularity, span), c)| AnchorEpisode { granularity, span, caption: c })
            .collect()
    }
}

fn unit(rng: &mut ChaCha8Rng, base: &[f32], spread: f32) -> Vec<f32> {
    base.iter().map(|x| x + rng.random_range(-spread..spread)).collect()
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let horizon = 3 * DAY;
    let time = |rng: &mut ChaCha8Rng| Timestamp(rng.random_range(0..horizon));
    let mut store = ChainStore::default();
    for (i, key) in KEYS.iter().enumerate() {
        if rng.random_bool(0.6) {
            let facts = (0..rng.random_range(1..6))
                .map(|j| TopicFact { time: time(&mut rng), fact: format!("{key} fact {i}.{j}") })
                .collect();
            let mut chain = TopicChain::new(*key, facts).unwrap();
            chain.embedding = unit(&mut rng, &base, 1.2);
            store.topics.push(chain);
        }
    }
    for k in 0..rng.random_range(0..4) {
        let steps = (0..rng.random_range(1..5))
            .map(|j| {
                let start = rng.random_range(0..horizon);
                EventStep {
                    start: Timestamp(start),
                    end: Timestamp(start + rng.random_range(0..4000)),
                    description: format!("step {k}.{j}"),
                }
            })
            .collect();
        let keys = vec![KEYS.choose(&mut rng).unwrap().to_string()];
        let mut chain = EventChain::new(format!("activity {k}"), keys, steps);
        chain.embedding = unit(&mut rng, &base, 1.2);
        store.events.push(chain);
    }
    let mut captions = Vec::new();
    let mut spans = Vec::new();
    for _ in 0..rng.random_range(0..8) {
        let g = *[Granularity::Sec30, Granularity::Sec30, Granularity::Min3].choose(&mut rng).unwrap();
        let start = rng.random_range(0..horizon);
        spans.push((g, TimeSpan::new(Timestamp(start), Timestamp(start + g.secs()))));
        let mut words: Vec<&str> = (0..3).map(|_| *KEYS.choose(&mut rng).unwrap()).collect();
        words.push("and");
        captions.push(words.join(" "));
    }
    let query = format!("what about the {}s", KEYS.choose(&mut rng).unwrap());
    Fixture {
        store,
        captions,
        spans,
        query,
        query_embedding: unit(&mut rng, &base, 0.8),
        t: Timestamp(rng.random_range(0..horizon)),
        config: InjectionConfig {
            topic_min_hits: rng.random_range(1..3),
            storyline_min_hits: 1,
            cosine_threshold: 0.7,
            max_chains: rng.random_range(0..5),
            dedup_margin_secs: 60,
        },
    }
}

pub fn anchored(f: &Fixture, chain: ChainRef) -> bool {
    let retrieved = f.retrieved();
    match chain {
        ChainRef::Topic(i) => {
            let p = KeywordPattern::new(&f.store.topics[i].entity);
            retrieved.iter().filter(|e| e.granularity == Granularity::Sec30 && p.matches(e.caption)).count()
                >= f.config.topic_min_hits
        }
        ChainRef::Event(i) => f.store.events[i]
            .steps
            .iter()
            .any(|s| retrieved.iter().any(|e| s.start <= e.span.start && e.span.end <= s.end)),
    }
}

impl Fixture {
    pub fn run(&self) -> Injection {
        inject(&self.query, &self.query_embedding, self.t, &self.retrieved(), &self.store, &self.config)
    }
}

/// Every injection law checked at once; the first broken one is returned.
pub fn law_violation(f: &Fixture) -> Option<String> {
    let out = f.run();
    let admitted: Vec<ChainRef> = out.admitted().collect();
    if admitted.len() > f.config.max_chains {
        return Some(format!("{} chains over budget {}", admitted.len(), f.config.max_chains));
    }
    if admitted[..out.tier1.len()] != out.tier1[..] {
        return Some("tier 1 not first".into());
    }
    if admitted.iter().collect::<std::collections::BTreeSet<_>>().len() != admitted.len() {
        return Some("chain admitted twice".into());
    }
    if let Some(c) = admitted.iter().find(|&&c| !anchored(f, c)) {
        return Some(format!("unanchored chain {c:?}"));
    }
    if let Some((c, s)) = out.tier2.iter().find(|&&(c, s)| s < 0.7 || s != cosine(&f.query_embedding, f.store.embedding(c))) {
        return Some(format!("tier 2 chain {c:?} at cosine {s}"));
    }
    let retrieved = f.retrieved();
    for fact in &out.facts {
        if fact.start > f.t {
            return Some(format!("future fact at {:?}", fact.start));
        }
        let end = fact.end.unwrap_or(fact.start);
        let covered = retrieved.iter().any(|e| {
            e.span.start.secs().saturating_sub(60) <= fact.start.secs() && end.secs() <= e.span.end.secs() + 60
        });
        if covered {
            return Some(format!("fact at {:?} already covered", fact.start));
        }
    }
    let first_event = out.facts.iter().position(|x| !x.is_topic()).unwrap_or(out.facts.len());
    if out.facts[first_event..].iter().any(|x| x.is_topic()) {
        return Some("topic fact after an event step".into());
    }
    None
}
