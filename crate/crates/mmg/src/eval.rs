//! Evaluation over answer traces: Recall@K against gold spans, retrieved
//! item composition, round statistics, accuracy and a one-sample bootstrap
//! CI on the accuracy gap to an anchor.

use std::collections::BTreeMap;

use mmg_core::context::ContextItem;
use mmg_core::{TimeSpan, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{answer_letter, AnswerMode, QuestionTrace};
use crate::artefacts::Question;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub bootstrap_resamples: usize,
    pub level: f64,
    pub seed: u64,
    /// Reference accuracy the bootstrap gap is measured against.
    pub anchor: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![16, 20, 30, 50], bootstrap_resamples: 2000, level: 0.95, seed: 0, anchor: None }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("bootstrap needs at least one flag")]
    EmptyFlags,
    #[error("gold span for {question_id} ends before it starts")]
    BadSpan { question_id: String },
}

/// Gold time ranges for one question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub question_id: String,
    pub spans: Vec<[Timestamp; 2]>,
}

impl GoldSpan {
    pub fn ranges(&self) -> Result<Vec<TimeSpan>, EvalError> {
        self.spans
            .iter()
            .map(|&[a, b]| {
                if a <= b {
                    Ok(TimeSpan::new(a, b))
                } else {
                    Err(EvalError::BadSpan { question_id: self.question_id.clone() })
                }
            })
            .collect()
    }
}

pub fn gold_map(gold: &[GoldSpan]) -> Result<BTreeMap<String, Vec<TimeSpan>>, EvalError> {
    gold.iter().map(|g| Ok((g.question_id.clone(), g.ranges()?))).collect()
}

/// Intervals share more than an endpoint (or are the same instant).
fn overlaps(a: &TimeSpan, b: &TimeSpan) -> bool {
    (a.start < b.end && b.start < a.end) || a == b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub k: usize,
    pub hits: usize,
    pub total: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub points: Vec<RecallPoint>,
    /// Questions without gold, excluded from the denominator.
    pub missing_gold: Vec<String>,
}

/// Time ranges of episode and frame items in retrieval order.
pub fn ranked_ranges(trace: &QuestionTrace) -> Vec<TimeSpan> {
    trace.retrieval_order().filter_map(ContextItem::time_range).collect()
}

/// Rank (1-based) of the first retrieved range overlapping a gold span.
pub fn first_hit(trace: &QuestionTrace, gold: &[TimeSpan]) -> Option<usize> {
    ranked_ranges(trace).iter().position(|r| gold.iter().any(|g| overlaps(r, g))).map(|p| p + 1)
}

pub fn recall_at_k(traces: &[QuestionTrace], gold: &BTreeMap<String, Vec<TimeSpan>>, ks: &[usize]) -> RecallCurve {
    let mut missing = Vec::new();
    let mut ranks = Vec::new();
    for t in traces {
        match gold.get(&t.question_id) {
            Some(g) => ranks.push(first_hit(t, g)),
            None => missing.push(t.question_id.clone()),
        }
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let total = ranks.len();
    let points = ks
        .into_iter()
        .map(|k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
            RecallPoint { k, hits, total, recall: if total == 0 { 0.0 } else { hits as f64 / total as f64 } }
        })
        .collect();
    RecallCurve { points, missing_gold: missing }
}

pub const COMPOSITION_TYPES: [&str; 4] = ["episode", "semantic", "frames", "narrative"];

fn composition_type(item: &ContextItem) -> &'static str {
    match item {
        ContextItem::Episode { .. } => "episode",
        ContextItem::Semantic { .. } => "semantic",
        ContextItem::Frames { .. } => "frames",
        ContextItem::Narrative(_) => "narrative",
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub counts: BTreeMap<String, usize>,
    /// Empty when nothing was retrieved.
    pub shares: BTreeMap<String, f64>,
    pub questions: usize,
    pub questions_with_frames: usize,
    pub frames_coverage: f64,
}

pub fn composition(traces: &[QuestionTrace]) -> Composition {
    let mut counts: BTreeMap<String, usize> = COMPOSITION_TYPES.iter().map(|t| (t.to_string(), 0)).collect();
    let mut with_frames = 0;
    for t in traces {
        let mut frames = false;
        for item in t.retrieval_order() {
            let ty = composition_type(item);
            frames |= ty == "frames";
            *counts.get_mut(ty).expect("known type") += 1;
        }
        with_frames += usize::from(frames);
    }
    let total: usize = counts.values().sum();
    let shares = if total == 0 {
        BTreeMap::new()
    } else {
        counts.iter().map(|(k, &v)| (k.clone(), v as f64 / total as f64)).collect()
    };
    let questions = traces.len();
    Composition {
        counts,
        shares,
        questions,
        questions_with_frames: with_frames,
        frames_coverage: if questions == 0 { 0.0 } else { with_frames as f64 / questions as f64 },
    }
}

/// Rounds and context cost per question. Text cost is whitespace tokens of
/// the rendered non-frame context; frames are counted as references.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub questions: usize,
    pub mean_rounds: f64,
    /// Share of questions that used the full round allowance.
    pub at_cap_share: f64,
    pub mean_text_tokens: f64,
    pub mean_frames: f64,
    pub aborted: usize,
}

pub fn round_stats(traces: &[QuestionTrace], max_rounds: usize) -> RoundStats {
    let n = traces.len();
    if n == 0 {
        return RoundStats::default();
    }
    let mut rounds = 0usize;
    let mut at_cap = 0usize;
    let mut tokens = 0usize;
    let mut frames = 0usize;
    for t in traces {
        let r = t.search_rounds();
        rounds += r;
        at_cap += usize::from(r >= max_rounds);
        for item in &t.context().items {
            match item {
                ContextItem::Frames { frames: f, .. } => frames += f.len(),
                other => tokens += other.render_context().split_whitespace().count(),
            }
        }
    }
    let nf = n as f64;
    RoundStats {
        questions: n,
        mean_rounds: rounds as f64 / nf,
        at_cap_share: at_cap as f64 / nf,
        mean_text_tokens: tokens as f64 / nf,
        mean_frames: frames as f64 / nf,
        aborted: traces.iter().filter(|t| t.aborted).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Questions with a reference answer.
    pub graded: usize,
    pub correct: usize,
    pub accuracy: f64,
}

pub fn is_correct(mode: AnswerMode, answer: Option<&str>, reference: &str) -> bool {
    let Some(answer) = answer else { return false };
    match mode {
        AnswerMode::MultipleChoice => {
            answer_letter(answer).is_some_and(|a| Some(a) == answer_letter(reference))
        }
        AnswerMode::Open => {
            let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            norm(answer) == norm(reference)
        }
    }
}

/// Per-question correctness flags in question order, graded questions only.
pub fn correctness(traces: &[QuestionTrace], questions: &[Question], mode: AnswerMode) -> Vec<bool> {
    let by_id: BTreeMap<&str, &QuestionTrace> = traces.iter().map(|t| (t.question_id.as_str(), t)).collect();
    questions
        .iter()
        .filter_map(|q| {
            let reference = q.answer.as_deref()?;
            let answer = by_id.get(q.id.as_str()).and_then(|t| t.answer.as_deref());
            Some(is_correct(mode, answer, reference))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub anchor: f64,
    /// mean(flags) - anchor.
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl BootstrapCi {
    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

/// Percentile CI of mean(resample) - anchor. The interval is widened to
/// contain the point estimate when the percentiles miss it.
pub fn bootstrap_ci(flags: &[bool], anchor: f64, resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi, EvalError> {
    if flags.is_empty() {
        return Err(EvalError::EmptyFlags);
    }
    let n = flags.len();
    let point = flags.iter().filter(|&&f| f).count() as f64 / n as f64 - anchor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaps: Vec<f64> = (0..resamples.max(1))
        .map(|_| {
            let hits = (0..n).filter(|_| flags[rng.random_range(0..n)]).count();
            hits as f64 / n as f64 - anchor
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len();
    let tail = (1.0 - level) / 2.0;
    let lo = ((tail * m as f64).floor() as usize).min(m - 1);
    let hi = (((1.0 - tail) * m as f64).ceil() as usize).clamp(1, m) - 1;
    Ok(BootstrapCi {
        anchor,
        point,
        lower: gaps[lo].min(point),
        upper: gaps[hi].max(point),
        level,
        resamples: m,
        seed,
    })
}

/// Everything the harness reports; contains no wall-clock data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub questions: usize,
    pub accuracy: Option<Accuracy>,
    pub recall: RecallCurve,
    pub composition: Composition,
    pub rounds: RoundStats,
    pub bootstrap: Option<BootstrapCi>,
}

pub fn evaluate(
    traces: &[QuestionTrace],
    questions: &[Question],
    gold: &BTreeMap<String, Vec<TimeSpan>>,
    mode: AnswerMode,
    max_rounds: usize,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let flags = correctness(traces, questions, mode);
    let accuracy = (!flags.is_empty()).then(|| {
        let correct = flags.iter().filter(|&&f| f).count();
        Accuracy { graded: flags.len(), correct, accuracy: correct as f64 / flags.len() as f64 }
    });
    let bootstrap = match (config.anchor, flags.is_empty()) {
        (Some(anchor), false) => Some(bootstrap_ci(&flags, anchor, config.bootstrap_resamples, config.level, config.seed)?),
        _ => None,
    };
    Ok(EvalReport {
        questions: traces.len(),
        accuracy,
        recall: recall_at_k(traces, gold, &config.ks),
        composition: composition(traces),
        rounds: round_stats(traces, max_rounds),
        bootstrap,
    })
}
