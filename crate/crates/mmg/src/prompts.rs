//! Prompt templates with `{slot}` markers (`{{` and `}}` escape braces).
//!
//! The shipped defaults are compiled in; a directory of `<name>.txt` files
//! overrides any of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

pub const AGGREGATE: &str = "aggregate";
pub const OPENIE: &str = "openie";
pub const CONSOLIDATE: &str = "consolidate";
pub const TOPIC_CHAIN: &str = "topic_chain";
pub const EVENT_STEP1: &str = "event_step1";
pub const EVENT_STEP2: &str = "event_step2";
pub const EVENT_STEP2_MISSED: &str = "event_step2_missed";
pub const EVENT_STEP3: &str = "event_step3";
pub const CONTROLLER: &str = "controller";
pub const CONTROLLER_IR: &str = "controller_ir";
pub const QA_MC: &str = "qa_mc";
pub const QA_OPEN: &str = "qa_open";

const DEFAULTS: &[(&str, &str)] = &[
    ("aggregate", include_str!("../prompts/aggregate.txt")),
    ("aggregate_user", include_str!("../prompts/aggregate_user.txt")),
    ("openie", include_str!("../prompts/openie.txt")),
    ("openie_user", include_str!("../prompts/openie_user.txt")),
    ("consolidate", include_str!("../prompts/consolidate.txt")),
    ("consolidate_user", include_str!("../prompts/consolidate_user.txt")),
    ("topic_chain", include_str!("../prompts/topic_chain.txt")),
    ("event_step1", include_str!("../prompts/event_step1.txt")),
    ("event_step2", include_str!("../prompts/event_step2.txt")),
    ("event_step2_missed", include_str!("../prompts/event_step2_missed.txt")),
    ("event_step3", include_str!("../prompts/event_step3.txt")),
    ("controller", include_str!("../prompts/controller.txt")),
    ("controller_ir", include_str!("../prompts/controller_ir.txt")),
    ("controller_user", include_str!("../prompts/controller_user.txt")),
    ("qa_mc", include_str!("../prompts/qa_mc.txt")),
    ("qa_open", include_str!("../prompts/qa_open.txt")),
    ("answer_user", include_str!("../prompts/answer_user.txt")),
];

/// Templates that take slots. The others are sent verbatim as system prompts.
const SLOTS: &[(&str, &[&str])] = &[
    ("aggregate_user", &["descriptions"]),
    ("openie_user", &["passage"]),
    ("consolidate_user", &["new_triple", "existing_triples"]),
    ("topic_chain", &["entity", "episodes_text"]),
    ("event_step1", &["date", "segments"]),
    ("event_step2", &["daily_activities"]),
    ("event_step2_missed", &["found_events"]),
    ("event_step3", &["chain_name", "day", "start_time", "end_time", "captions_text"]),
    ("controller_user", &["question", "round_history"]),
    ("answer_user", &["question", "choices", "context"]),
];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unknown template {0}")]
    Unknown(String),
    #[error("template {template}: slot {{{slot}}} has no value")]
    MissingSlot { template: String, slot: String },
    #[error("template {template}: unexpected slot {{{slot}}}")]
    UnexpectedSlot { template: String, slot: String },
    #[error("template {template}: unbalanced brace at byte {offset}")]
    Unbalanced { template: String, offset: usize },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug)]
pub struct PromptLibrary {
    templates: BTreeMap<String, String>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        PromptLibrary {
            templates: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn expected_slots(name: &str) -> Option<&'static [&'static str]> {
    SLOTS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Slot names referenced by a template, in order of first use.
pub fn slots_of(name: &str, text: &str) -> Result<Vec<String>, PromptError> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => i += 2,
            b'}' if bytes.get(i + 1) == Some(&b'}') => i += 2,
            b'{' => {
                let close = text[i..].find('}').ok_or(PromptError::Unbalanced {
                    template: name.into(),
                    offset: i,
                })?;
                let slot = &text[i + 1..i + close];
                if !out.iter().any(|s| s == slot) {
                    out.push(slot.to_string());
                }
                i += close + 1;
            }
            b'}' => return Err(PromptError::Unbalanced { template: name.into(), offset: i }),
            _ => i += 1,
        }
    }
    Ok(out)
}

impl PromptLibrary {
    /// Defaults, overridden by every `<name>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut lib = Self::default();
        let io = |e| PromptError::Io { path: dir.display().to_string(), source: e };
        for entry in fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let text = fs::read_to_string(&path)
                .map_err(|e| PromptError::Io { path: path.display().to_string(), source: e })?;
            lib.insert(&name, text)?;
        }
        Ok(lib)
    }

    /// Registers or replaces a template after checking its slots.
    pub fn insert(&mut self, name: &str, text: String) -> Result<(), PromptError> {
        if let Some(expected) = expected_slots(name) {
            for slot in slots_of(name, &text)? {
                if !expected.contains(&slot.as_str()) {
                    return Err(PromptError::UnexpectedSlot { template: name.into(), slot });
                }
            }
        }
        self.templates.insert(name.to_string(), text);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Raw template text.
    pub fn get(&self, name: &str) -> Result<&str, PromptError> {
        self.templates
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| PromptError::Unknown(name.into()))
    }

    /// Substitutes every slot; all referenced slots must be given.
    pub fn fill(&self, name: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let text = self.get(name)?;
        let given: BTreeSet<&str> = values.iter().map(|(k, _)| *k).collect();
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(pos) = rest.find(['{', '}']) {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if tail.starts_with("{{") || tail.starts_with("}}") {
                out.push_str(&tail[..1]);
                rest = &tail[2..];
            } else if tail.starts_with('{') {
                let close = tail.find('}').ok_or(PromptError::Unbalanced {
                    template: name.into(),
                    offset: text.len() - tail.len(),
                })?;
                let slot = &tail[1..close];
                if !given.contains(slot) {
                    return Err(PromptError::MissingSlot { template: name.into(), slot: slot.into() });
                }
                let value = values.iter().find(|(k, _)| *k == slot).map(|(_, v)| *v).unwrap_or("");
                out.push_str(value);
                rest = &tail[close + 1..];
            } else {
                return Err(PromptError::Unbalanced { template: name.into(), offset: text.len() - tail.len() });
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}
