//! Round records, cross-round dedup, the time-ordered merged context and
//! the controller's round-history text.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::chains::NarrativeFact;
use crate::graph::NodeId;
use crate::time::{Granularity, TimeSpan, Timestamp};

pub const NO_NEW_RESULTS: &str = "[No new results]";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum Decision {
    Search { search_query: String },
    Answer,
}

impl Decision {
    pub fn label(&self) -> &'static str {
        match self {
            Decision::Search { .. } => "search",
            Decision::Answer => "answer",
        }
    }

    pub fn query(&self) -> Option<&str> {
        match self {
            Decision::Search { search_query } => Some(search_query),
            Decision::Answer => None,
        }
    }
}

/// One retrieved item of a round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContextItem {
    Episode { id: NodeId, granularity: Granularity, span: TimeSpan, caption: String },
    /// Frame references of a visual clip.
    Frames { id: NodeId, span: TimeSpan, frames: Vec<String> },
    Semantic { id: NodeId, snapshot: Timestamp, text: String },
    Narrative(NarrativeFact),
}

impl ContextItem {
    /// Dedup key: node id, or the fact id for narrative items.
    pub fn key(&self) -> &str {
        match self {
            ContextItem::Episode { id, .. }
            | ContextItem::Frames { id, .. }
            | ContextItem::Semantic { id, .. } => id.as_str(),
            ContextItem::Narrative(f) => &f.id,
        }
    }

    pub fn time(&self) -> Timestamp {
        match self {
            ContextItem::Episode { span, .. } | ContextItem::Frames { span, .. } => span.start,
            ContextItem::Semantic { snapshot, .. } => *snapshot,
            ContextItem::Narrative(f) => f.start,
        }
    }

    /// Time range for recall scoring; only episodes and frames carry one.
    pub fn time_range(&self) -> Option<TimeSpan> {
        match self {
            ContextItem::Episode { span, .. } | ContextItem::Frames { span, .. } => Some(*span),
            _ => None,
        }
    }

    /// Tie-break rank among items with equal time.
    pub fn rank(&self) -> u8 {
        match self {
            ContextItem::Episode { .. } => 0,
            ContextItem::Frames { .. } => 1,
            ContextItem::Semantic { .. } => 2,
            ContextItem::Narrative(_) => 3,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ContextItem::Episode { .. } => "episode",
            ContextItem::Frames { .. } => "frames",
            ContextItem::Semantic { .. } => "semantic",
            ContextItem::Narrative(f) if f.is_topic() => "topic",
            ContextItem::Narrative(_) => "event",
        }
    }

    /// Line used in the controller's round history.
    pub fn render_history(&self) -> String {
        match self {
            ContextItem::Episode { granularity, span, caption, .. } => {
                format!("[{span}] ({})\n{caption}", granularity.history_label())
            }
            ContextItem::Frames { span, frames, .. } => {
                format!("[{span}] (frames) {}", frames.join(", "))
            }
            ContextItem::Semantic { text, .. } => text.clone(),
            ContextItem::Narrative(f) => f.render(),
        }
    }

    /// Line used in the answerer's merged context.
    pub fn render_context(&self) -> String {
        match self {
            ContextItem::Episode { granularity, span, caption, .. } => format!(
                "[Retrieved episode] [{span}] ({}) {caption}",
                granularity.history_label()
            ),
            ContextItem::Frames { span, frames, .. } => {
                format!("[Visual frames] [{span}] {}", frames.join(", "))
            }
            ContextItem::Semantic { snapshot, text, .. } => {
                format!("[Retrieved semantic] [{snapshot}] {text}")
            }
            ContextItem::Narrative(f) => f.render(),
        }
    }
}

/// One controller round: its decision and the items new to this question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub index: usize,
    pub decision: Decision,
    /// New items after dedup, in retrieval order.
    pub items: Vec<ContextItem>,
    /// Items retrieved before dedup.
    pub candidates: usize,
}

impl RoundRecord {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(ContextItem::key)
    }
}

/// Drops candidates whose key was already seen, and repeats within the
/// list, keeping order. Newly kept keys are added to `seen`.
pub fn dedup_round(candidates: Vec<ContextItem>, seen: &mut BTreeSet<String>) -> Vec<ContextItem> {
    candidates
        .into_iter()
        .filter(|item| seen.insert(item.key().to_string()))
        .collect()
}

/// Time-ordered union of every round's items.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergedContext {
    pub items: Vec<ContextItem>,
}

impl MergedContext {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn render(&self) -> String {
        let lines: Vec<String> = self.items.iter().map(ContextItem::render_context).collect();
        lines.join("\n")
    }
}

/// Sorts by item time, then episode < frames < semantic < narrative, then
/// key. An item key seen in an earlier round is kept once.
pub fn assemble_context(rounds: &[RoundRecord]) -> MergedContext {
    let mut seen = BTreeSet::new();
    let mut items: Vec<ContextItem> = rounds
        .iter()
        .flat_map(|r| r.items.iter())
        .filter(|item| seen.insert(item.key().to_string()))
        .cloned()
        .collect();
    items.sort_by(|a, b| {
        a.time()
            .cmp(&b.time())
            .then(a.rank().cmp(&b.rank()))
            .then_with(|| a.key().cmp(b.key()))
    });
    MergedContext { items }
}

pub const TRUNCATION_MARKER: &str = " [...]";

fn truncate_chars(text: &str, budget: usize) -> String {
    match text.char_indices().nth(budget) {
        None => text.to_string(),
        Some((cut, _)) => format!("{}{TRUNCATION_MARKER}", &text[..cut]),
    }
}

/// Round-history block of the controller prompt. Each round's retrieved
/// summary is cut at `char_budget` characters with a marker.
pub fn render_round_history(rounds: &[RoundRecord], char_budget: usize) -> String {
    if rounds.is_empty() {
        return "[]".to_string();
    }
    let blocks: Vec<String> = rounds
        .iter()
        .map(|r| {
            let retrieved = if r.items.is_empty() {
                NO_NEW_RESULTS.to_string()
            } else {
                let lines: Vec<String> = r.items.iter().map(ContextItem::render_history).collect();
                truncate_chars(&lines.join("\n"), char_budget)
            };
            let mut block = format!("### Round {}\nDecision: {}\n", r.index, r.decision.label());
            if let Some(q) = r.decision.query() {
                block.push_str(&format!("Search Query: {q}\n"));
            }
            block.push_str("Retrieved:\n");
            block.push_str(&retrieved);
            block
        })
        .collect();
    blocks.join("\n\n")
}
