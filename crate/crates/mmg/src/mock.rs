//! Deterministic offline providers.
//!
//! [`HashEmbedder`] maps text to unit vectors by signed feature hashing of
//! its case-folded words, so texts sharing words have positive cosine.
//! [`ScriptedChat`] replays scripted replies keyed by template name and a
//! substring of the user message, and otherwise falls back to simple
//! heuristics that produce well-formed output for every shipped template.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use mmg_core::text::tokenize;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::providers::{ChatProvider, ChatRequest, ProviderError, TextEmbedder, VisualEmbedder};

#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    domain: &'static str,
}

impl HashEmbedder {
    pub fn text(dim: usize, seed: u64) -> Self {
        HashEmbedder { dim, seed, domain: "text" }
    }

    pub fn visual(dim: usize, seed: u64) -> Self {
        HashEmbedder { dim, seed, domain: "visual" }
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            tokens.push(String::new());
        }
        let mut v = vec![0f64; self.dim];
        for token in &tokens {
            let mut h = Sha256::new();
            h.update(self.domain.as_bytes());
            h.update(self.seed.to_le_bytes());
            h.update(token.as_bytes());
            let digest = h.finalize();
            let idx = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % self.dim as u64;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[idx as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

impl VisualEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_query_visual(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        Ok(self.embed(text))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Text(String),
    Error { error: String },
}

impl Reply {
    pub fn text(s: impl Into<String>) -> Self {
        Reply::Text(s.into())
    }

    pub fn error(s: impl Into<String>) -> Self {
        Reply::Error { error: s.into() }
    }
}

/// Replies for requests of `template` whose user message contains
/// `contains`. Replies are consumed in order; the last one repeats.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub replies: Vec<Reply>,
}

impl ScriptRule {
    pub fn new(template: &str, contains: Option<&str>, replies: Vec<Reply>) -> Self {
        ScriptRule { template: template.into(), contains: contains.map(str::to_string), replies }
    }
}

#[derive(Debug)]
pub struct ScriptedChat {
    rules: Vec<ScriptRule>,
    cursors: Mutex<Vec<usize>>,
}

impl ScriptedChat {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let n = rules.len();
        ScriptedChat { rules, cursors: Mutex::new(vec![0; n]) }
    }
}

impl ChatProvider for ScriptedChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let hit = self.rules.iter().position(|r| {
            r.template == request.template
                && !r.replies.is_empty()
                && r.contains.as_deref().is_none_or(|c| request.user.contains(c))
        });
        if let Some(i) = hit {
            let reply = {
                let mut cursors = self.cursors.lock().expect("script lock");
                let rule = &self.rules[i];
                let reply = rule.replies[cursors[i].min(rule.replies.len() - 1)].clone();
                cursors[i] += 1;
                reply
            };
            return match reply {
                Reply::Text(t) => Ok(t),
                Reply::Error { error } => Err(ProviderError::Scripted(error)),
            };
        }
        heuristic(&request.template, &request.user).ok_or_else(|| ProviderError::NoScript(request.template.clone()))
    }
}

fn after_marker<'a>(text: &'a str, marker: &str) -> &'a str {
    text.find(marker).map_or("", |i| &text[i + marker.len()..])
}

fn truncate(text: &str, max_chars: usize) -> String {
    text.chars().take(max_chars).collect()
}

/// `[label] rest` lines of `text`, as `(label, rest)`.
fn bracket_lines(text: &str) -> Vec<(&str, &str)> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim();
            let inner = l.strip_prefix('[')?;
            let close = inner.find(']')?;
            Some((&inner[..close], inner[close + 1..].trim()))
        })
        .collect()
}

fn heuristic(template: &str, user: &str) -> Option<String> {
    Some(match template {
        "aggregate" => {
            let lines: Vec<&str> = after_marker(user, "Descriptions:\n").lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            truncate(&lines.join(" "), 600)
        }
        "openie" => openie(after_marker(user, "Paragraph:\n")),
        "consolidate" => consolidate(user),
        "topic_chain" => {
            let facts: Vec<serde_json::Value> = bracket_lines(user)
                .into_iter()
                .filter(|(label, _)| label.starts_with("DAY") && label.len() >= 8)
                .take(8)
                .map(|(label, text)| {
                    let minutes = label.rsplit_once(':').map_or(label, |(hm, _)| hm);
                    json!({"time": minutes, "fact": text})
                })
                .collect();
            serde_json::Value::Array(facts).to_string()
        }
        "event_step1" => {
            let segments = after_marker(user, "Segments:\n");
            let acts: Vec<serde_json::Value> = bracket_lines(segments)
                .into_iter()
                .filter_map(|(range, text)| {
                    let (a, b) = range.split_once(" - ")?;
                    let name: Vec<String> = tokenize(text).into_iter().take(3).collect();
                    Some(json!({
                        "name": name.join(" "),
                        "time_range": format!("{}-{}", a.trim(), b.trim()),
                        "summary": text,
                        "key_entities": [],
                    }))
                })
                .collect();
            serde_json::Value::Array(acts).to_string()
        }
        "event_step2" => event_step2(user),
        "event_step3" => {
            let name = after_marker(user, "event chain \"").split('"').next().unwrap_or_default();
            let first = bracket_lines(after_marker(user, "Captions:\n")).first().map(|(_, t)| *t).unwrap_or("");
            json!({"description": format!("{name}: {}", truncate(first, 300))}).to_string()
        }
        "controller" => {
            let q = question_of(user);
            if user.contains("Round History: []") {
                json!({"decision": "search", "search_query": q}).to_string()
            } else {
                json!({"decision": "answer"}).to_string()
            }
        }
        "controller_ir" => {
            let q = question_of(user);
            let memory = ["episodic", "visual", "semantic"];
            match memory.get(user.matches("### Round").count()) {
                Some(m) => json!({"decision": "search", "selected_memory": {"memory_type": m, "search_query": q}}).to_string(),
                None => json!({"decision": "answer"}).to_string(),
            }
        }
        "qa_mc" => answer_choice(user),
        "qa_open" => after_marker(user, "Context:\n")
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map_or_else(|| "No supporting evidence was retrieved.".to_string(), str::to_string),
        _ => return None,
    })
}

fn question_of(user: &str) -> String {
    user.lines().find_map(|l| l.strip_prefix("Query: ")).unwrap_or_default().trim().to_string()
}

fn openie(passage: &str) -> String {
    let mut entities: Vec<String> = Vec::new();
    let mut run: Vec<&str> = Vec::new();
    let flush = |run: &mut Vec<&str>, entities: &mut Vec<String>| {
        if !run.is_empty() {
            let name = run.join(" ");
            if !entities.contains(&name) {
                entities.push(name);
            }
            run.clear();
        }
    };
    for raw in passage.split_whitespace() {
        let word = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '_');
        let capital = word.chars().next().is_some_and(char::is_uppercase) && word != "I";
        if capital {
            run.push(word);
        } else {
            flush(&mut run, &mut entities);
        }
        if raw.ends_with(|c: char| matches!(c, '.' | ',' | ';' | ':' | '!' | '?')) {
            flush(&mut run, &mut entities);
        }
    }
    flush(&mut run, &mut entities);
    let triples: Vec<[&str; 3]> = entities.windows(2).map(|w| [w[0].as_str(), "is with", w[1].as_str()]).collect();
    json!({"named_entities": entities, "triples": triples}).to_string()
}

fn consolidate(user: &str) -> String {
    let new_line = after_marker(user, "New triple:\n").lines().next().unwrap_or("[]");
    let new: Vec<String> = serde_json::from_str(new_line).unwrap_or_default();
    let fold = |t: &[String]| t.iter().map(|s| s.to_lowercase()).collect::<Vec<_>>();
    let remove: Vec<usize> = after_marker(user, "Relevant existing triples:\n")
        .lines()
        .filter_map(|l| {
            let (idx, rest) = l.split_once(". ")?;
            let t: Vec<String> = serde_json::from_str(rest).ok()?;
            (fold(&t) == fold(&new)).then(|| idx.trim().parse().ok()).flatten()
        })
        .collect();
    json!({"updated_triple": new, "triples_to_remove": remove}).to_string()
}

fn event_step2(user: &str) -> String {
    let found: BTreeSet<String> = after_marker(user, "Events already found")
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- "))
        .map(str::to_lowercase)
        .collect();
    let mut groups: BTreeMap<String, Vec<serde_json::Value>> = BTreeMap::new();
    let mut days: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for line in after_marker(user, "Daily activities:\n").lines() {
        let Some((day, rest)) = line.trim().split_once(' ') else { continue };
        let Some((range, rest)) = rest.strip_prefix('[').and_then(|r| r.split_once("] ")) else { continue };
        let Some((name, summary)) = rest.split_once(": ") else { continue };
        let Some((a, b)) = range.split_once('-') else { continue };
        if name.is_empty() || found.contains(&name.to_lowercase()) {
            continue;
        }
        days.entry(name.to_string()).or_default().insert(day.to_string());
        groups.entry(name.to_string()).or_default().push(json!({
            "day": day, "start_time": a, "end_time": b, "description": summary,
        }));
    }
    let events: Vec<serde_json::Value> = groups
        .into_iter()
        .filter(|(name, _)| days[name].len() >= 2)
        .map(|(name, steps)| json!({"name": name, "steps": steps, "key_entities": []}))
        .collect();
    serde_json::Value::Array(events).to_string()
}

fn answer_choice(user: &str) -> String {
    let context: BTreeSet<String> = tokenize(after_marker(user, "Context:\n")).into_iter().collect();
    let head = user.split("Context:\n").next().unwrap_or_default();
    let mut best: Option<(usize, char)> = None;
    for line in head.lines() {
        let mut chars = line.chars();
        let (Some(letter), Some('.')) = (chars.next(), chars.next()) else { continue };
        if !letter.is_ascii_uppercase() {
            continue;
        }
        let words: BTreeSet<String> = tokenize(&line[2..]).into_iter().collect();
        let score = words.iter().filter(|w| context.contains(*w)).count();
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, letter));
        }
    }
    best.map_or('A', |(_, l)| l).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmg_core::text::cosine;

    #[test]
    fn embeddings_are_deterministic_unit_vectors() {
        let e = HashEmbedder::text(2560, 7);
        let a = e.embed("Katrina asks about hot pot");
        assert_eq!(a, e.embed("katrina ASKS about hot pot"));
        let norm: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-6);
        let empty = e.embed("");
        assert_eq!(empty.len(), 2560);
        assert!(empty.iter().any(|x| *x != 0.0));
        assert!(cosine(&a, &e.embed("hot pot")) > cosine(&a, &e.embed("red box upstairs")));
        assert_ne!(e.embed("x"), HashEmbedder::visual(2560, 7).embed("x"));
        assert_ne!(e.embed("x"), HashEmbedder::text(2560, 8).embed("x"));
    }

    fn chat(template: &str, user: &str) -> String {
        ScriptedChat::new(vec![])
            .complete(&ChatRequest { template: template.into(), system: String::new(), user: user.into() })
            .unwrap()
    }

    #[test]
    fn heuristic_openie_extracts_capitalized_runs() {
        let out: serde_json::Value =
            serde_json::from_str(&chat("openie", "Paragraph:\nI watch Luis hand a gift to Maria Lopez.")).unwrap();
        assert_eq!(out["named_entities"], json!(["Luis", "Maria Lopez"]));
        assert_eq!(out["triples"], json!([["Luis", "is with", "Maria Lopez"]]));
    }

    #[test]
    fn heuristic_controller_searches_then_answers() {
        let first = chat("controller", "Query: Where is the box?\nRound History: []\n\n### Response:");
        assert_eq!(first, r#"{"decision":"search","search_query":"Where is the box?"}"#);
        let later = chat("controller", "Query: q\nRound History:\n### Round 1\nDecision: search");
        assert_eq!(later, r#"{"decision":"answer"}"#);
    }

    #[test]
    fn heuristic_answer_picks_best_overlap() {
        let user = "Question: Where?\nA. red shelf\nB. brulo table\n\nContext:\n[Retrieved semantic] [DAY1 10:00:00] (X, left, lamp on brulo table)";
        assert_eq!(chat("qa_mc", user), "B");
    }

    #[test]
    fn unscripted_unknown_template_errors() {
        let r = ScriptedChat::new(vec![])
            .complete(&ChatRequest { template: "other".into(), system: String::new(), user: String::new() });
        assert!(matches!(r, Err(ProviderError::NoScript(_))));
    }

    #[test]
    fn rules_match_on_substring_and_repeat_last() {
        let c = ScriptedChat::new(vec![ScriptRule::new("openie", Some("Zorvath"), vec![Reply::text("1"), Reply::text("2")])]);
        let r = |u: &str| c.complete(&ChatRequest { template: "openie".into(), system: String::new(), user: u.into() });
        assert_eq!(r("Zorvath nods").unwrap(), "1");
        assert_eq!(r("Zorvath nods").unwrap(), "2");
        assert_eq!(r("Zorvath nods").unwrap(), "2");
        assert!(r("nobody").unwrap().contains("named_entities"));
    }

    #[test]
    fn reply_serde_shapes() {
        let rules: Vec<Reply> = serde_json::from_str(r#"["ok", {"error": "boom"}]"#).unwrap();
        assert_eq!(rules, vec![Reply::text("ok"), Reply::error("boom")]);
    }
}
