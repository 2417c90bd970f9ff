//! Offline distillation through the chat provider: caption aggregation,
//! OpenIE, triple consolidation, topic chains and three-step event chains.
//!
//! Every reply is cached under the SHA-256 of template name, system and
//! user message (`cache/<2 hex>/<64 hex>.txt`), so a rerun after a crash
//! only issues calls for outputs that are still missing. A reply that does
//! not parse gets exactly one re-ask with a format reminder, charged to the
//! `repair` stage; if that also fails the record is dropped with a warning.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use mmg_core::text::Canonicalizer;
use mmg_core::{CaptionRow, ChainStore, EventChain, EventStep, Granularity, MentionRow, TimeSpan, Timestamp, TopicChain, TopicFact, TripleRow};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::jsonx;
use crate::prompts::{self, PromptError, PromptLibrary};
use crate::providers::{stage, ChatRequest, ProviderError, Providers};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub narrator: String,
    /// Most recent same-subject triples shown to consolidation.
    pub relevant_cap: usize,
    /// Subject-or-object occurrences that make an entity a topic candidate.
    pub topic_min_triples: usize,
    pub topic_exclude_narrator: bool,
    /// Mention captions shown per topic-chain prompt.
    pub topic_max_captions: usize,
    /// Parallel provider calls within one stage.
    pub workers: usize,
    pub embed_batch: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            narrator: "A1_JAKE".into(),
            relevant_cap: 20,
            topic_min_triples: 2,
            topic_exclude_narrator: true,
            topic_max_captions: 64,
            workers: 1,
            embed_batch: 64,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("{stage} failed for {item}: {source}")]
    Provider { stage: String, item: String, source: ProviderError },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("reply cache {path}: {source}")]
    Cache { path: String, source: std::io::Error },
}

/// Content-addressed reply store; `None` disables caching.
#[derive(Debug, Default)]
pub struct ReplyCache {
    dir: Option<PathBuf>,
    write: Mutex<()>,
}

impl ReplyCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        ReplyCache { dir, write: Mutex::new(()) }
    }

    pub fn key(request: &ChatRequest) -> String {
        let mut h = Sha256::new();
        for part in [&request.template, &request.system, &request.user] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.txt")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fs::read_to_string(self.path(key)?).ok()
    }

    pub fn put(&self, key: &str, text: &str) -> Result<(), DistillError> {
        let Some(path) = self.path(key) else { return Ok(()) };
        let _guard = self.write.lock().expect("cache lock");
        let err = |source| DistillError::Cache { path: path.display().to_string(), source };
        fs::create_dir_all(path.parent().expect("cache subdir")).map_err(err)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(err)?;
        fs::rename(&tmp, &path).map_err(err)
    }
}

/// Output sizes that enter the call-count formula.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillCounts {
    /// Topic-chain candidate entities (one call each).
    pub topic_candidates: usize,
    pub topic_chains: usize,
    /// Days with 10 min captions (one Step-1 call each).
    pub days: usize,
    /// Video sources (two Step-2 calls each).
    pub sources: usize,
    pub event_chains: usize,
    /// Steps over all event chains (one Step-3 call each).
    pub event_steps: usize,
    pub aggregate_windows: [usize; 3],
}

impl DistillCounts {
    /// E + D + 2V + sum of |S_k|.
    pub fn chain_calls(&self) -> usize {
        self.topic_candidates + self.days + 2 * self.sources + self.event_steps
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillOutput {
    /// Input 30 s captions followed by the aggregated layers.
    pub captions: Vec<CaptionRow>,
    pub mentions: Vec<MentionRow>,
    pub triples: Vec<TripleRow>,
    pub chains: ChainStore,
    pub counts: DistillCounts,
    pub warnings: Vec<String>,
}

/// Parsed OpenIE reply.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpenIe {
    pub named_entities: Vec<String>,
    pub triples: Vec<[String; 3]>,
    /// Rows dropped for not being 3 non-empty strings.
    pub rejected: usize,
}

fn string_triple(v: &Value) -> Option<[String; 3]> {
    let a = v.as_array()?;
    if a.len() != 3 {
        return None;
    }
    let s: Vec<String> = a.iter().filter_map(|x| x.as_str()).map(|x| x.trim().to_string()).collect();
    if s.len() != 3 || s.iter().any(String::is_empty) {
        return None;
    }
    Some([s[0].clone(), s[1].clone(), s[2].clone()])
}

pub fn parse_openie(text: &str) -> Result<OpenIe, String> {
    let v = jsonx::parse_first(text, '{')?;
    let entities = v.get("named_entities").and_then(Value::as_array).ok_or("missing named_entities list")?;
    let triples = v.get("triples").and_then(Value::as_array).ok_or("missing triples list")?;
    let mut out = OpenIe {
        named_entities: entities
            .iter()
            .filter_map(Value::as_str)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        ..Default::default()
    };
    for t in triples {
        match string_triple(t) {
            Some(t) => out.triples.push(t),
            None => out.rejected += 1,
        }
    }
    Ok(out)
}

/// Parsed consolidation reply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Consolidation {
    pub updated: [String; 3],
    pub remove: Vec<i64>,
}

pub fn parse_consolidation(text: &str) -> Result<Consolidation, String> {
    let v = jsonx::parse_first(text, '{')?;
    let updated = v.get("updated_triple").and_then(string_triple).ok_or("updated_triple is not a 3-string list")?;
    let remove = v
        .get("triples_to_remove")
        .and_then(Value::as_array)
        .ok_or("missing triples_to_remove list")?
        .iter()
        .map(|x| x.as_i64().ok_or("non-integer index"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Consolidation { updated, remove })
}

/// `(facts, dropped rows)` from a topic-chain reply.
pub fn parse_topic_facts(text: &str) -> Result<(Vec<TopicFact>, usize), String> {
    let v = jsonx::parse_first(text, '[')?;
    let mut dropped = 0;
    let mut facts = Vec::new();
    for row in v.as_array().expect("array") {
        let time = row.get("time").and_then(Value::as_str).and_then(|s| Timestamp::parse(s).ok());
        let fact = row.get("fact").and_then(Value::as_str).map(str::trim).filter(|s| !s.is_empty());
        match (time, fact) {
            (Some(time), Some(fact)) => facts.push(TopicFact { time, fact: fact.to_string() }),
            _ => dropped += 1,
        }
    }
    Ok((facts, dropped))
}

/// One Step-1 activity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Activity {
    pub day: u64,
    pub start: Timestamp,
    pub end: Timestamp,
    pub name: String,
    pub summary: String,
    pub key_entities: Vec<String>,
}

fn day_time(day: u64, clock: &str) -> Option<Timestamp> {
    Timestamp::parse(&format!("DAY{day} {}", clock.trim())).ok()
}

fn parse_day(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().trim_start_matches("DAY").trim_start_matches("Day").trim().parse().ok(),
        _ => None,
    }
}

fn string_list(v: Option<&Value>) -> Vec<String> {
    v.and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default()
}

pub fn parse_activities(text: &str, day: u64) -> Result<(Vec<Activity>, usize), String> {
    let v = jsonx::parse_first(text, '[')?;
    let mut dropped = 0;
    let mut out = Vec::new();
    for row in v.as_array().expect("array") {
        let name = row.get("name").and_then(Value::as_str).map(str::trim).unwrap_or_default();
        let range = row.get("time_range").and_then(Value::as_str).and_then(|r| r.split_once('-'));
        let parsed = range.and_then(|(a, b)| Some((day_time(day, a)?, day_time(day, b)?)));
        match parsed {
            Some((start, end)) if !name.is_empty() && start <= end => out.push(Activity {
                day,
                start,
                end,
                name: name.to_string(),
                summary: row.get("summary").and_then(Value::as_str).unwrap_or_default().trim().to_string(),
                key_entities: string_list(row.get("key_entities")),
            }),
            _ => dropped += 1,
        }
    }
    Ok((out, dropped))
}

/// `(chains, dropped)` from a Step-2 reply; chains keep only valid steps
/// and need at least two.
pub fn parse_event_chains(text: &str) -> Result<(Vec<EventChain>, usize), String> {
    let v = jsonx::parse_first(text, '[')?;
    let mut dropped = 0;
    let mut out = Vec::new();
    for row in v.as_array().expect("array") {
        let name = row.get("name").and_then(Value::as_str).map(str::trim).unwrap_or_default();
        let steps: Vec<EventStep> = row
            .get("steps")
            .and_then(Value::as_array)
            .map(|steps| {
                steps
                    .iter()
                    .filter_map(|s| {
                        let day = parse_day(s.get("day")?)?;
                        Some(EventStep {
                            start: day_time(day, s.get("start_time")?.as_str()?)?,
                            end: day_time(day, s.get("end_time")?.as_str()?)?,
                            description: s.get("description").and_then(Value::as_str).unwrap_or_default().trim().to_string(),
                        })
                    })
                    .collect()
            })
            .unwrap_or_default();
        let chain = EventChain::new(name, string_list(row.get("key_entities")), steps);
        if name.is_empty() || chain.steps.len() < 2 {
            dropped += 1;
        } else {
            out.push(chain);
        }
    }
    Ok((out, dropped))
}

pub fn parse_step_description(text: &str) -> Result<String, String> {
    let desc = match jsonx::parse_first(text, '{') {
        Ok(v) => v.get("description").and_then(Value::as_str).map(str::to_string),
        Err(_) => serde_json::from_str::<String>(text.trim()).ok(),
    };
    desc.map(|d| d.trim().to_string()).filter(|d| !d.is_empty()).ok_or_else(|| "no description".to_string())
}

const REPAIR_REMINDER: &str = "Your previous reply could not be parsed";

fn clean_text(text: &str) -> String {
    text.trim().trim_matches('"').trim().to_string()
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps `f` over `items` with up to `width` threads, keeping order.
fn par_map<T: Sync, R: Send>(width: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if width <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(width);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub struct Distiller<'a> {
    providers: &'a Providers,
    prompts: &'a PromptLibrary,
    cache: ReplyCache,
    config: DistillConfig,
    canon: Canonicalizer,
    warnings: Mutex<Vec<String>>,
}

impl<'a> Distiller<'a> {
    pub fn new(providers: &'a Providers, prompts: &'a PromptLibrary, cache: ReplyCache, config: DistillConfig) -> Self {
        let canon = Canonicalizer::new(config.narrator.clone());
        Distiller { providers, prompts, cache, config, canon, warnings: Mutex::new(Vec::new()) }
    }

    fn warn(&self, message: String) {
        log::warn!("{message}");
        self.warnings.lock().expect("warnings lock").push(message);
    }

    pub fn take_warnings(&self) -> Vec<String> {
        std::mem::take(&mut *self.warnings.lock().expect("warnings lock"))
    }

    fn ask(&self, stage: &str, request: &ChatRequest, item: &str) -> Result<String, DistillError> {
        let key = ReplyCache::key(request);
        if let Some(hit) = self.cache.get(&key) {
            self.providers.ledger.record(stage::CACHE_HIT);
            return Ok(hit);
        }
        let text = self.providers.chat(stage, request).map_err(|source| DistillError::Provider {
            stage: stage.to_string(),
            item: item.to_string(),
            source,
        })?;
        self.cache.put(&key, &text)?;
        Ok(text)
    }

    /// Ask, parse, and on a parse failure re-ask once.
    fn ask_parsed<T>(
        &self,
        stage: &str,
        request: ChatRequest,
        item: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, DistillError> {
        let first = self.ask(stage, &request, item)?;
        let err = match parse(&first) {
            Ok(v) => return Ok(Some(v)),
            Err(e) => e,
        };
        let repair = ChatRequest {
            user: format!(
                "{}\n\n{REPAIR_REMINDER} ({err}). Reply again with valid JSON only, exactly in the requested output format.",
                request.user
            ),
            ..request
        };
        let second = self.ask(stage::REPAIR, &repair, item)?;
        match parse(&second) {
            Ok(v) => Ok(Some(v)),
            Err(e) => {
                self.warn(format!("{stage}: unparseable reply for {item}: {e}"));
                Ok(None)
            }
        }
    }

    fn request(&self, template: &str, system: Option<&str>, user: String) -> Result<ChatRequest, DistillError> {
        Ok(ChatRequest {
            template: template.to_string(),
            system: match system {
                Some(name) => self.prompts.get(name)?.to_string(),
                None => String::new(),
            },
            user,
        })
    }

    /// 3 min, 10 min and 1 h captions, each summarizing the next finer
    /// layer's captions whose midpoint falls in its aligned window.
    pub fn aggregate_captions(&self, captions_30s: &[CaptionRow]) -> Result<Vec<CaptionRow>, DistillError> {
        let mut level: Vec<CaptionRow> = captions_30s.to_vec();
        level.sort_by_key(|c| c.start);
        let last_end = level.iter().map(|c| c.end).max().unwrap_or_default();
        let mut out = Vec::new();
        for g in [Granularity::Min3, Granularity::Min10, Granularity::Hour1] {
            let mut groups: BTreeMap<Timestamp, Vec<&CaptionRow>> = BTreeMap::new();
            for c in &level {
                groups.entry(g.bucket_start(c.span().midpoint())).or_default().push(c);
            }
            let windows: Vec<(TimeSpan, String)> = groups
                .into_iter()
                .map(|(start, children)| {
                    let end = Timestamp(start.0 + g.secs()).min(last_end).max(start);
                    let lines: Vec<String> = children.iter().map(|c| single_line(&c.text)).collect();
                    (TimeSpan::new(start, end), lines.join("\n"))
                })
                .collect();
            let replies = par_map(self.config.workers, &windows, |(span, descriptions)| {
                let user = self.prompts.fill("aggregate_user", &[("descriptions", descriptions)])?;
                let request = self.request(prompts::AGGREGATE, Some(prompts::AGGREGATE), user)?;
                let item = format!("{} window {span}", g.label());
                self.ask(stage::AGGREGATE, &request, &item)
            });
            let mut next = Vec::with_capacity(windows.len());
            for ((span, _), reply) in windows.iter().zip(replies) {
                next.push(CaptionRow { granularity: g, start: span.start, end: span.end, text: clean_text(&reply?) });
            }
            out.extend(next.iter().cloned());
            level = next;
        }
        Ok(out)
    }

    pub fn extract_openie(&self, caption: &CaptionRow) -> Result<OpenIe, DistillError> {
        let user = self.prompts.fill("openie_user", &[("passage", &caption.text)])?;
        let request = self.request(prompts::OPENIE, Some(prompts::OPENIE), user)?;
        let item = format!("caption {}", caption.node_id());
        let parsed = self.ask_parsed(stage::OPENIE, request, &item, parse_openie)?;
        let out = parsed.unwrap_or_default();
        if out.rejected > 0 {
            self.warn(format!("openie: dropped {} malformed triple rows for {item}", out.rejected));
        }
        Ok(out)
    }

    /// Consolidates `new` against `existing` (rows of `rows`), returning the
    /// row to insert. With no relevant triples no call is made.
    pub fn consolidate_triple(
        &self,
        new: &[String; 3],
        snapshot: Timestamp,
        relevant: &[usize],
        rows: &[TripleRow],
    ) -> Result<TripleRow, DistillError> {
        let mut row = TripleRow {
            subject: new[0].clone(),
            predicate: new[1].clone(),
            object: new[2].clone(),
            snapshot,
            removes: Vec::new(),
        };
        if relevant.is_empty() {
            return Ok(row);
        }
        let existing: Vec<String> = relevant
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let t = &rows[r];
                format!("{i}. {}", serde_json::json!([t.subject, t.predicate, t.object]))
            })
            .collect();
        let new_json = serde_json::json!(new).to_string();
        let user = self.prompts.fill(
            "consolidate_user",
            &[("new_triple", &new_json), ("existing_triples", &existing.join("\n"))],
        )?;
        let request = self.request(prompts::CONSOLIDATE, Some(prompts::CONSOLIDATE), user)?;
        let item = format!("triple {new_json} at {snapshot}");
        let Some(c) = self.ask_parsed(stage::CONSOLIDATE, request, &item, parse_consolidation)? else {
            return Ok(row);
        };
        row.subject = c.updated[0].clone();
        row.predicate = c.updated[1].clone();
        row.object = c.updated[2].clone();
        for idx in c.remove {
            match usize::try_from(idx).ok().and_then(|i| relevant.get(i)) {
                Some(&r) if !row.removes.contains(&r) => row.removes.push(r),
                Some(_) => {}
                None => self.warn(format!("consolidate: index {idx} out of range for {item}")),
            }
        }
        row.removes.sort_unstable();
        Ok(row)
    }

    /// OpenIE over every 30 s caption, then chronological consolidation.
    pub fn extract_semantics(&self, captions_30s: &[CaptionRow]) -> Result<(Vec<MentionRow>, Vec<TripleRow>), DistillError> {
        let mut sorted: Vec<&CaptionRow> = captions_30s.iter().collect();
        sorted.sort_by_key(|c| c.start);
        let extractions = par_map(self.config.workers, &sorted, |c| self.extract_openie(c));
        let mut mentions = Vec::new();
        let mut rows: Vec<TripleRow> = Vec::new();
        let mut active: Vec<bool> = Vec::new();
        for (caption, ext) in sorted.iter().zip(extractions) {
            let ext = ext?;
            let mut seen = BTreeSet::new();
            for e in &ext.named_entities {
                if seen.insert(self.canon.key(e)) {
                    mentions.push(MentionRow { entity: e.clone(), window: Some(caption.start) });
                }
            }
            for t in &ext.triples {
                let key = self.canon.key(&t[0]);
                let mut relevant: Vec<usize> = (0..rows.len())
                    .rev()
                    .filter(|&i| active[i] && self.canon.key(&rows[i].subject) == key)
                    .take(self.config.relevant_cap)
                    .collect();
                relevant.reverse();
                let row = self.consolidate_triple(t, caption.start, &relevant, &rows)?;
                for &r in &row.removes {
                    active[r] = false;
                }
                rows.push(row);
                active.push(true);
            }
        }
        Ok((mentions, rows))
    }

    /// Entities recurring as subject or object, in first-seen order, with
    /// their display names.
    pub fn topic_candidates(&self, mentions: &[MentionRow], triples: &[TripleRow]) -> Vec<(String, String)> {
        let mut entities: BTreeSet<String> = mentions.iter().map(|m| self.canon.key(&m.entity)).collect();
        entities.extend(triples.iter().map(|t| self.canon.key(&t.subject)));
        let mut order: Vec<(String, String)> = Vec::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in triples {
            for raw in [&t.subject, &t.object] {
                let key = self.canon.key(raw);
                if !entities.contains(&key) {
                    continue;
                }
                let n = counts.entry(key.clone()).or_insert(0);
                if *n == 0 {
                    order.push((key, self.canon.display(raw)));
                }
                *n += 1;
            }
        }
        let narrator = self.canon.key(self.canon.narrator());
        order
            .into_iter()
            .filter(|(k, _)| counts[k] >= self.config.topic_min_triples)
            .filter(|(k, _)| !(self.config.topic_exclude_narrator && *k == narrator))
            .collect()
    }

    pub fn extract_topic_chain(&self, entity: &str, mention_captions: &[&CaptionRow]) -> Result<Option<TopicChain>, DistillError> {
        let lines: Vec<String> = mention_captions
            .iter()
            .take(self.config.topic_max_captions)
            .map(|c| format!("[{}] {}", c.start, single_line(&c.text)))
            .collect();
        let user = self.prompts.fill(prompts::TOPIC_CHAIN, &[("entity", entity), ("episodes_text", &lines.join("\n"))])?;
        let request = self.request(prompts::TOPIC_CHAIN, None, user)?;
        let item = format!("entity {entity}");
        let Some((facts, dropped)) = self.ask_parsed(stage::TOPIC_CHAIN, request, &item, parse_topic_facts)? else {
            return Ok(None);
        };
        if dropped > 0 {
            self.warn(format!("topic_chain: dropped {dropped} rows for {item}"));
        }
        Ok(TopicChain::new(entity, facts))
    }

    /// Topic chains for every candidate; `E` is the candidate count.
    pub fn extract_topic_chains(
        &self,
        captions_30s: &[CaptionRow],
        mentions: &[MentionRow],
        triples: &[TripleRow],
    ) -> Result<(Vec<TopicChain>, usize), DistillError> {
        let candidates = self.topic_candidates(mentions, triples);
        let mut by_window: BTreeMap<String, BTreeSet<Timestamp>> = BTreeMap::new();
        for m in mentions {
            if let Some(w) = m.window {
                by_window.entry(self.canon.key(&m.entity)).or_default().insert(w);
            }
        }
        for t in triples {
            for raw in [&t.subject, &t.object] {
                by_window.entry(self.canon.key(raw)).or_default().insert(t.snapshot);
            }
        }
        let mut sorted: Vec<&CaptionRow> = captions_30s.iter().collect();
        sorted.sort_by_key(|c| c.start);
        let results = par_map(self.config.workers, &candidates, |(key, display)| {
            let windows = by_window.get(key).cloned().unwrap_or_default();
            let captions: Vec<&CaptionRow> = sorted.iter().copied().filter(|c| windows.contains(&c.start)).collect();
            self.extract_topic_chain(display, &captions)
        });
        let mut chains = Vec::new();
        for r in results {
            chains.extend(r?);
        }
        Ok((chains, candidates.len()))
    }

    /// Step 1 per day, two Step-2 rounds, Step 3 per step. Returns the
    /// chains and the number of days.
    pub fn extract_event_chains(
        &self,
        captions_10min: &[CaptionRow],
        captions_30s: &[CaptionRow],
    ) -> Result<(Vec<EventChain>, usize), DistillError> {
        let mut days: BTreeMap<u64, Vec<&CaptionRow>> = BTreeMap::new();
        for c in captions_10min {
            days.entry(c.start.day()).or_default().push(c);
        }
        if days.is_empty() {
            return Ok((Vec::new(), 0));
        }
        let day_list: Vec<(u64, Vec<&CaptionRow>)> = days
            .into_iter()
            .map(|(d, mut v)| {
                v.sort_by_key(|c| c.start);
                (d, v)
            })
            .collect();
        let step1 = par_map(self.config.workers, &day_list, |(day, segments)| {
            let lines: Vec<String> = segments
                .iter()
                .map(|c| format!("[{} - {}] {}", c.start.clock(), c.end.clock(), single_line(&c.text)))
                .collect();
            let date = format!("DAY{day}");
            let user = self.prompts.fill(prompts::EVENT_STEP1, &[("date", &date), ("segments", &lines.join("\n"))])?;
            let request = self.request(prompts::EVENT_STEP1, None, user)?;
            let parsed = self.ask_parsed(stage::EVENT_STEP1, request, &date, |t| parse_activities(t, *day))?;
            if let Some((_, dropped)) = &parsed {
                if *dropped > 0 {
                    self.warn(format!("event_step1: dropped {dropped} activities for {date}"));
                }
            }
            Ok::<_, DistillError>(parsed.map(|(a, _)| a).unwrap_or_default())
        });
        let mut activities = Vec::new();
        for r in step1 {
            activities.extend(r?);
        }
        let daily: Vec<String> = activities
            .iter()
            .map(|a| {
                let mut line = format!(
                    "DAY{} [{}-{}] {}: {}",
                    a.day,
                    a.start.clock(),
                    a.end.clock(),
                    single_line(&a.name),
                    single_line(&a.summary)
                );
                if !a.key_entities.is_empty() {
                    line.push_str(&format!(" [entities: {}]", a.key_entities.join(", ")));
                }
                line
            })
            .collect();
        let daily = daily.join("\n");
        let base = self.prompts.fill(prompts::EVENT_STEP2, &[("daily_activities", &daily)])?;
        let first = self
            .ask_parsed(stage::EVENT_STEP2, self.request(prompts::EVENT_STEP2, None, base.clone())?, "discovery round", parse_event_chains)?
            .map(|(c, _)| c)
            .unwrap_or_default();
        let found: Vec<String> = first.iter().map(|c| format!("- {}", c.name)).collect();
        let missed_suffix = self.prompts.fill(prompts::EVENT_STEP2_MISSED, &[("found_events", &found.join("\n"))])?;
        let second = self
            .ask_parsed(
                stage::EVENT_STEP2,
                self.request(prompts::EVENT_STEP2, None, format!("{base}{missed_suffix}"))?,
                "missed-chain round",
                parse_event_chains,
            )?
            .map(|(c, _)| c)
            .unwrap_or_default();
        let mut names = BTreeSet::new();
        let mut chains: Vec<EventChain> = Vec::new();
        for c in first.into_iter().chain(second) {
            if names.insert(c.name.to_lowercase()) {
                chains.push(c);
            }
        }
        let mut sorted30: Vec<&CaptionRow> = captions_30s.iter().collect();
        sorted30.sort_by_key(|c| c.start);
        let jobs: Vec<(usize, usize)> =
            chains.iter().enumerate().flat_map(|(i, c)| (0..c.steps.len()).map(move |j| (i, j))).collect();
        let described = par_map(self.config.workers, &jobs, |&(i, j)| {
            let chain = &chains[i];
            let step = &chain.steps[j];
            let span = step.span();
            let lines: Vec<String> = sorted30
                .iter()
                .filter(|c| span.contains_span(&c.span()))
                .map(|c| format!("[{}] {}", c.start.clock(), single_line(&c.text)))
                .collect();
            let day = format!("DAY{}", step.start.day());
            let user = self.prompts.fill(
                prompts::EVENT_STEP3,
                &[
                    ("chain_name", &chain.name),
                    ("day", &day),
                    ("start_time", &step.start.clock()),
                    ("end_time", &step.end.clock()),
                    ("captions_text", &lines.join("\n")),
                ],
            )?;
            let item = format!("{} step {j}", chain.name);
            self.ask_parsed(stage::EVENT_STEP3, self.request(prompts::EVENT_STEP3, None, user)?, &item, parse_step_description)
        });
        for (&(i, j), d) in jobs.iter().zip(described) {
            if let Some(d) = d? {
                chains[i].steps[j].description = d;
            }
        }
        Ok((chains, day_list.len()))
    }

    /// Embeds every chain's content in place.
    pub fn embed_chains(&self, store: &mut ChainStore) -> Result<(), DistillError> {
        let texts: Vec<String> = store
            .topics
            .iter()
            .map(TopicChain::content)
            .chain(store.events.iter().map(EventChain::content))
            .collect();
        if texts.is_empty() {
            return Ok(());
        }
        let vectors = self.providers.embed_text_batched(&texts, self.config.embed_batch).map_err(|source| {
            DistillError::Provider { stage: stage::EMBED_TEXT.into(), item: "chain contents".into(), source }
        })?;
        let mut it = vectors.into_iter();
        for c in &mut store.topics {
            c.embedding = it.next().expect("one vector per chain");
        }
        for c in &mut store.events {
            c.embedding = it.next().expect("one vector per chain");
        }
        Ok(())
    }

    /// The whole pipeline over one video source's 30 s captions.
    pub fn run(&self, captions_30s: &[CaptionRow]) -> Result<DistillOutput, DistillError> {
        let mut captions: Vec<CaptionRow> =
            captions_30s.iter().filter(|c| c.granularity == Granularity::Sec30).cloned().collect();
        captions.sort_by_key(|c| c.start);
        let aggregated = self.aggregate_captions(&captions)?;
        let mut counts = DistillCounts::default();
        for c in &aggregated {
            let slot = match c.granularity {
                Granularity::Min3 => 0,
                Granularity::Min10 => 1,
                _ => 2,
            };
            counts.aggregate_windows[slot] += 1;
        }
        let (mentions, triples) = self.extract_semantics(&captions)?;
        let (topics, e) = self.extract_topic_chains(&captions, &mentions, &triples)?;
        let tenmin: Vec<CaptionRow> = aggregated.iter().filter(|c| c.granularity == Granularity::Min10).cloned().collect();
        let (events, days) = self.extract_event_chains(&tenmin, &captions)?;
        counts.topic_candidates = e;
        counts.topic_chains = topics.len();
        counts.days = days;
        counts.sources = usize::from(days > 0);
        counts.event_chains = events.len();
        counts.event_steps = events.iter().map(|c| c.steps.len()).sum();
        let mut chains = ChainStore { topics, events };
        self.embed_chains(&mut chains)?;
        captions.extend(aggregated);
        Ok(DistillOutput { captions, mentions, triples, chains, counts, warnings: self.take_warnings() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::{Reply, ScriptRule};
    use crate::providers::ProviderConfig;

    fn t(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    fn providers(script: Vec<ScriptRule>) -> Providers {
        let mut p = Providers::mock(&ProviderConfig { text_dim: 16, visual_dim: 8, ..Default::default() }, script);
        p.register_templates(PromptLibrary::default().names().collect::<Vec<_>>());
        p
    }

    fn captions(start: &str, n: usize) -> Vec<CaptionRow> {
        let s = t(start);
        (0..n)
            .map(|i| CaptionRow {
                granularity: Granularity::Sec30,
                start: Timestamp(s.0 + 30 * i as u64),
                end: Timestamp(s.0 + 30 * (i as u64 + 1)),
                text: format!("caption number {i}"),
            })
            .collect()
    }

    #[test]
    fn six_captions_make_one_3min_window() {
        let p = providers(vec![]);
        let lib = PromptLibrary::default();
        let d = Distiller::new(&p, &lib, ReplyCache::default(), DistillConfig::default());
        let out = d.aggregate_captions(&captions("DAY1 10:00:00", 6)).unwrap();
        let g: Vec<Granularity> = out.iter().map(|c| c.granularity).collect();
        assert_eq!(g, vec![Granularity::Min3, Granularity::Min10, Granularity::Hour1]);
        assert_eq!(out[0].span(), TimeSpan::new(t("DAY1 10:00:00"), t("DAY1 10:03:00")));
        assert_eq!(p.ledger.get(stage::AGGREGATE), 3);
    }

    #[test]
    fn one_hour_costs_27_calls() {
        let p = providers(vec![]);
        let lib = PromptLibrary::default();
        let d = Distiller::new(&p, &lib, ReplyCache::default(), DistillConfig { workers: 4, ..Default::default() });
        let out = d.aggregate_captions(&captions("DAY1 10:00:00", 120)).unwrap();
        let count = |g| out.iter().filter(|c| c.granularity == g).count();
        assert_eq!((count(Granularity::Min3), count(Granularity::Min10), count(Granularity::Hour1)), (20, 6, 1));
        assert_eq!(p.ledger.get(stage::AGGREGATE), 27);
        let ten: Vec<String> = out.iter().filter(|c| c.granularity == Granularity::Min10).map(|c| c.node_id().0).collect();
        assert_eq!(ten[0], "episode_10min_DAY1_10:00--10:10");
    }

    #[test]
    fn partial_trailing_window_is_short() {
        let p = providers(vec![]);
        let lib = PromptLibrary::default();
        let d = Distiller::new(&p, &lib, ReplyCache::default(), DistillConfig::default());
        let out = d.aggregate_captions(&captions("DAY1 10:00:00", 9)).unwrap();
        let min3: Vec<TimeSpan> = out.iter().filter(|c| c.granularity == Granularity::Min3).map(|c| c.span()).collect();
        assert_eq!(min3[1], TimeSpan::new(t("DAY1 10:03:00"), t("DAY1 10:04:30")));
    }

    #[test]
    fn aggregation_failure_names_the_window() {
        let p = providers(vec![ScriptRule::new("aggregate", None, vec![Reply::error("down")])]);
        let lib = PromptLibrary::default();
        let d = Distiller::new(&p, &lib, ReplyCache::default(), DistillConfig::default());
        let err = d.aggregate_captions(&captions("DAY1 10:00:00", 6)).unwrap_err();
        assert!(err.to_string().contains("3min window DAY1 10:00:00 - DAY1 10:03:00"), "{err}");
    }

    #[test]
    fn openie_parsing() {
        let ok = parse_openie(r#"{"named_entities":["Katrina"],"triples":[["Katrina","asks about","hot pot ingredients"]]}"#).unwrap();
        assert_eq!(ok.named_entities, vec!["Katrina"]);
        assert_eq!(ok.triples.len(), 1);
        assert!(parse_openie(r#"{"named_entities":["Katrina"]}"#).is_err());
        let partial = parse_openie(r#"{"named_entities":[],"triples":[["a","b"],["a","b","c"]]}"#).unwrap();
        assert_eq!((partial.triples.len(), partial.rejected), (1, 1));
    }

    #[test]
    fn malformed_openie_gets_one_repair_then_degrades() {
        let p = providers(vec![ScriptRule::new("openie", None, vec![Reply::text("not json")])]);
        let lib = PromptLibrary::default();
        let d = Distiller::new(&p, &lib, ReplyCache::default(), DistillConfig::default());
        let out = d.extract_openie(&captions("DAY1 10:00:00", 1)[0]).unwrap();
        assert_eq!(out, OpenIe::default());
        assert_eq!(p.ledger.get(stage::OPENIE), 1);
        assert_eq!(p.ledger.get(stage::REPAIR), 1);
        assert_eq!(d.take_warnings().len(), 1);
    }

    #[test]
    fn consolidation_tombstones_and_merges() {
        let reply = r#"{"updated_triple": ["Tasha", "likes", "strawberry cake"], "triples_to_remove": [0, 5]}"#;
        let p = providers(vec![ScriptRule::new("consolidate", None, vec![Reply::text(reply)])]);
        let lib = PromptLibrary::default();
        let d = Distiller::new(&p, &lib, ReplyCache::default(), DistillConfig::default());
        let rows = vec![TripleRow { subject: "Tasha".into(), predicate: "likes".into(), object: "cake".into(), snapshot: t("DAY1 10:00:00"), removes: vec![] }];
        let new = ["Tasha".to_string(), "likes".to_string(), "strawberry cake".to_string()];
        let row = d.consolidate_triple(&new, t("DAY2 10:00:00"), &[0], &rows).unwrap();
        assert_eq!(row.removes, vec![0]);
        assert_eq!(row.object, "strawberry cake");
        assert_eq!(d.take_warnings().len(), 1);
        let fresh = d.consolidate_triple(&new, t("DAY2 10:00:00"), &[], &rows).unwrap();
        assert!(fresh.removes.is_empty());
        assert_eq!(p.ledger.get(stage::CONSOLIDATE), 1);
    }

    #[test]
    fn topic_fact_parsing() {
        let (facts, dropped) = parse_topic_facts(r#"[{"time":"DAY1 17:45","fact":"a"},{"time":"noon","fact":"b"},{"time":"DAY2 11:00","fact":"c"}]"#).unwrap();
        assert_eq!(facts.len(), 2);
        assert_eq!(dropped, 1);
        assert!(TopicChain::new("x", parse_topic_facts("[]").unwrap().0).is_none());
    }

    #[test]
    fn single_activity_chains_are_rejected() {
        let text = r#"[{"name":"coffee","steps":[{"day":"DAY2","start_time":"09:00:00","end_time":"09:20:00","description":"a"},{"day":3,"start_time":"09:00:00","end_time":"09:30:00","description":"b"}],"key_entities":["coffee"]},
                       {"name":"solo","steps":[{"day":"DAY1","start_time":"10:00:00","end_time":"11:00:00","description":"x"}]}]"#;
        let (chains, dropped) = parse_event_chains(text).unwrap();
        assert_eq!(chains.len(), 1);
        assert_eq!(dropped, 1);
        assert_eq!(chains[0].steps[1].start, t("DAY3 09:00:00"));
        assert_eq!(parse_step_description(r#"{"description": "d"}"#).unwrap(), "d");
        assert_eq!(parse_step_description(r#""plain""#).unwrap(), "plain");
    }

    #[test]
    fn cache_makes_reruns_free() {
        let dir = tempfile::tempdir().unwrap();
        let lib = PromptLibrary::default();
        let caps = captions("DAY1 10:00:00", 12);
        let p1 = providers(vec![]);
        let d1 = Distiller::new(&p1, &lib, ReplyCache::new(Some(dir.path().to_path_buf())), DistillConfig::default());
        let a = d1.aggregate_captions(&caps).unwrap();
        let p2 = providers(vec![]);
        let d2 = Distiller::new(&p2, &lib, ReplyCache::new(Some(dir.path().to_path_buf())), DistillConfig::default());
        assert_eq!(d2.aggregate_captions(&caps).unwrap(), a);
        assert_eq!(p2.ledger.get(stage::AGGREGATE), 0);
        assert_eq!(p2.ledger.get(stage::CACHE_HIT), p1.ledger.get(stage::AGGREGATE));
    }
}
