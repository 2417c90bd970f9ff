//! Online answering loop: controller decision, one retrieval pass plus
//! chain injection per search round, cross-round dedup, time-ordered
//! context and a final answer call.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use mmg_core::chains::{self, AnchorEpisode};
use mmg_core::context::{assemble_context, dedup_round, render_round_history, ContextItem, Decision, MergedContext, RoundRecord};
use mmg_core::graph::NodeBody;
use mmg_core::ppr::{self, Query};
use mmg_core::text::cosine;
use mmg_core::{ChainStore, Granularity, InjectionConfig, MemoryGraph, NodeIx, NodeKind, PprConfig, TimeView, Timestamp};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artefacts::Question;
use crate::jsonx;
use crate::prompts::{self, PromptError, PromptLibrary};
use crate::providers::{stage, ChatRequest, ProviderError, Providers};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    #[default]
    MultipleChoice,
    Open,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    /// Graph retrieval with chain injection.
    #[default]
    Mmg,
    /// Per-modality baseline: one memory type per round.
    Ir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_rounds: usize,
    /// Tolerated tool errors per question.
    pub error_budget: usize,
    /// Characters of retrieved text per round in the round history.
    pub history_char_budget: usize,
    pub answer_mode: AnswerMode,
    pub controller: ControllerKind,
    pub inject: bool,
    /// Questions answered concurrently.
    pub workers: usize,
    pub ir_episodes: usize,
    pub ir_triples: usize,
    pub ir_clips: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_rounds: 5,
            error_budget: 5,
            history_char_budget: 2000,
            answer_mode: AnswerMode::MultipleChoice,
            controller: ControllerKind::Mmg,
            inject: true,
            workers: 1,
            ir_episodes: 3,
            ir_triples: 10,
            ir_clips: 3,
        }
    }
}

/// Loaded graph plus narrative chains.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    pub graph: MemoryGraph,
    pub chains: ChainStore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryType {
    Episodic,
    Semantic,
    Visual,
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// One controller round as recorded in the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub index: usize,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_type: Option<MemoryType>,
    /// Items retrieved before dedup.
    pub candidates: usize,
    /// New items in retrieval order.
    pub items: Vec<ContextItem>,
    /// Provider calls made during the round, by stage.
    pub calls: BTreeMap<String, u64>,
    pub elapsed_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionTrace {
    pub question_id: String,
    pub question: String,
    pub time: Timestamp,
    pub rounds: Vec<RoundTrace>,
    /// The round cap forced the answer.
    pub forced: bool,
    /// The error budget ran out; no answer.
    pub aborted: bool,
    pub errors: Vec<String>,
    pub answer: Option<String>,
    /// Provider calls for the whole question, by stage.
    pub calls: BTreeMap<String, u64>,
    pub elapsed_us: u64,
}

impl QuestionTrace {
    pub fn search_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| matches!(r.decision, Decision::Search { .. })).count()
    }

    pub fn records(&self) -> Vec<RoundRecord> {
        self.rounds
            .iter()
            .map(|r| RoundRecord { index: r.index, decision: r.decision.clone(), items: r.items.clone(), candidates: r.candidates })
            .collect()
    }

    /// The merged context the answer was produced from.
    pub fn context(&self) -> MergedContext {
        assemble_context(&self.records())
    }

    /// Items in retrieval order across rounds.
    pub fn retrieval_order(&self) -> impl Iterator<Item = &ContextItem> {
        self.rounds.iter().flat_map(|r| r.items.iter())
    }
}

/// Controller JSON for the graph controller.
pub fn parse_decision(text: &str) -> Result<Decision, String> {
    let slice = jsonx::first_balanced(text, '{').ok_or("no JSON object in controller reply")?;
    let d: Decision = serde_json::from_str(slice).map_err(|e| e.to_string())?;
    match &d {
        Decision::Search { search_query } if search_query.trim().is_empty() => Err("empty search_query".into()),
        _ => Ok(d),
    }
}

/// Controller JSON for the baseline controller.
pub fn parse_ir_decision(text: &str) -> Result<(Decision, Option<MemoryType>), String> {
    let v = jsonx::parse_first(text, '{')?;
    match v.get("decision").and_then(Value::as_str) {
        Some("answer") => Ok((Decision::Answer, None)),
        Some("search") => {
            let sel = v.get("selected_memory").ok_or("missing selected_memory")?;
            let memory: MemoryType = serde_json::from_value(sel.get("memory_type").cloned().ok_or("missing memory_type")?)
                .map_err(|e| e.to_string())?;
            let q = sel.get("search_query").and_then(Value::as_str).map(str::trim).filter(|q| !q.is_empty());
            let q = q.ok_or("missing search_query")?;
            Ok((Decision::Search { search_query: q.to_string() }, Some(memory)))
        }
        _ => Err("decision must be \"search\" or \"answer\"".into()),
    }
}

fn choice_letter(i: usize) -> char {
    char::from(b'A' + (i % 26) as u8)
}

/// Choice lines as shown to the answerer.
pub fn render_choices(choices: &[String]) -> String {
    let lines: Vec<String> = choices.iter().enumerate().map(|(i, c)| format!("{}. {c}", choice_letter(i))).collect();
    lines.join("\n")
}

/// The choice letter an answer commits to, if any.
pub fn answer_letter(answer: &str) -> Option<char> {
    let t = answer.trim().trim_start_matches(['(', '[', '"', '*']);
    let c = t.chars().next()?.to_ascii_uppercase();
    let rest = t[1..].chars().next();
    (c.is_ascii_uppercase() && rest.is_none_or(|r| !r.is_alphanumeric())).then_some(c)
}

pub struct Agent<'a> {
    memory: &'a Memory,
    providers: &'a Providers,
    prompts: &'a PromptLibrary,
    ppr: PprConfig,
    injection: InjectionConfig,
    config: AgentConfig,
}

type Calls = BTreeMap<String, u64>;

fn bump(calls: &mut Calls, stage: &str) {
    *calls.entry(stage.to_string()).or_insert(0) += 1;
}

impl<'a> Agent<'a> {
    pub fn new(
        memory: &'a Memory,
        providers: &'a Providers,
        prompts: &'a PromptLibrary,
        ppr: PprConfig,
        injection: InjectionConfig,
        config: AgentConfig,
    ) -> Self {
        Agent { memory, providers, prompts, ppr, injection, config }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    fn episode_item(&self, ix: NodeIx) -> Option<ContextItem> {
        let node = self.memory.graph.node(ix);
        match &node.body {
            NodeBody::Episode(e) => Some(ContextItem::Episode {
                id: node.id.clone(),
                granularity: e.granularity,
                span: e.span,
                caption: e.caption.clone(),
            }),
            _ => None,
        }
    }

    fn frames_item(&self, clip: NodeIx) -> Option<ContextItem> {
        let node = self.memory.graph.node(clip);
        match &node.body {
            NodeBody::VisualClip(c) if !c.frames.is_empty() => {
                Some(ContextItem::Frames { id: node.id.clone(), span: c.span, frames: c.frames.clone() })
            }
            _ => None,
        }
    }

    fn triple_item(&self, ix: NodeIx) -> Option<ContextItem> {
        let node = self.memory.graph.node(ix);
        match &node.body {
            NodeBody::Triple(t) => Some(ContextItem::Semantic { id: node.id.clone(), snapshot: t.snapshot, text: t.render() }),
            _ => None,
        }
    }

    /// One retrieval pass plus injection: episodes (each followed by its
    /// co-clip frames), triples, then narrative facts.
    pub fn graph_search(&self, query: &str, t: Timestamp, calls: &mut Calls) -> Result<Vec<ContextItem>, ProviderError> {
        bump(calls, stage::EMBED_TEXT);
        let text_embedding = self.providers.embed_text(&[query.to_string()])?.remove(0);
        let visual_embedding = if self.ppr.gamma > 0.0 {
            bump(calls, stage::EMBED_VISUAL);
            Some(self.providers.embed_query_visual(query)?)
        } else {
            None
        };
        let view = TimeView::new(&self.memory.graph, t);
        let q = Query { text: query, text_embedding: &text_embedding, visual_embedding: visual_embedding.as_deref() };
        let retained = ppr::retrieve(&view, &q, &self.ppr).map(|r| r.retained).unwrap_or_default();
        let graph = &self.memory.graph;
        let mut items = Vec::new();
        for r in &retained {
            match graph.node(r.node).kind() {
                NodeKind::Episode => {
                    items.extend(self.episode_item(r.node));
                    if graph.node(r.node).granularity() == Some(Granularity::Sec30) {
                        let clip = r.via_clip.or_else(|| graph.co_clips(r.node).find(|&c| view.is_active(c)));
                        items.extend(clip.and_then(|c| self.frames_item(c)));
                    }
                }
                NodeKind::SemanticTriple => items.extend(self.triple_item(r.node)),
                _ => {}
            }
        }
        if self.config.inject && !self.memory.chains.is_empty() {
            let anchors: Vec<AnchorEpisode<'_>> = items
                .iter()
                .filter_map(|i| match i {
                    ContextItem::Episode { granularity, span, caption, .. } => {
                        Some(AnchorEpisode { granularity: *granularity, span: *span, caption })
                    }
                    _ => None,
                })
                .collect();
            let injection = chains::inject(query, &text_embedding, t, &anchors, &self.memory.chains, &self.injection);
            items.extend(injection.facts.into_iter().map(ContextItem::Narrative));
        }
        Ok(items)
    }

    fn top_by<F>(&self, view: &TimeView<'_>, k: usize, score: F) -> Vec<NodeIx>
    where
        F: Fn(NodeIx) -> Option<f64>,
    {
        let mut scored: Vec<(NodeIx, f64)> = view.active_nodes().filter_map(|ix| score(ix).map(|s| (ix, s))).collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| self.memory.graph.id(a.0).cmp(self.memory.graph.id(b.0)))
        });
        scored.into_iter().take(k).map(|(ix, _)| ix).collect()
    }

    /// Baseline retrieval over one memory type by plain cosine.
    pub fn ir_search(&self, memory: MemoryType, query: &str, t: Timestamp, calls: &mut Calls) -> Result<Vec<ContextItem>, ProviderError> {
        let view = TimeView::new(&self.memory.graph, t);
        let graph = &self.memory.graph;
        match memory {
            MemoryType::Visual => {
                bump(calls, stage::EMBED_VISUAL);
                let q = self.providers.embed_query_visual(query)?;
                let top = self.top_by(&view, self.config.ir_clips, |ix| graph.node(ix).visual_embedding().map(|e| cosine(&q, e)));
                Ok(top.into_iter().filter_map(|ix| self.frames_item(ix)).collect())
            }
            MemoryType::Episodic | MemoryType::Semantic => {
                bump(calls, stage::EMBED_TEXT);
                let q = self.providers.embed_text(&[query.to_string()])?.remove(0);
                let (k, want) = match memory {
                    MemoryType::Episodic => (self.config.ir_episodes, NodeKind::Episode),
                    _ => (self.config.ir_triples, NodeKind::SemanticTriple),
                };
                let top = self.top_by(&view, k, |ix| {
                    let node = graph.node(ix);
                    if node.kind() != want || node.granularity() == Some(Granularity::Hour1) {
                        return None;
                    }
                    node.text_embedding().map(|e| cosine(&q, e))
                });
                Ok(top.into_iter().filter_map(|ix| self.episode_item(ix).or_else(|| self.triple_item(ix))).collect())
            }
        }
    }

    fn controller_call(&self, question: &str, rounds: &[RoundRecord], calls: &mut Calls) -> Result<Result<(Decision, Option<MemoryType>), String>, AgentError> {
        let history = render_round_history(rounds, self.config.history_char_budget);
        let history = if rounds.is_empty() { format!("Round History: {history}") } else { format!("Round History:\n{history}") };
        let user = self.prompts.fill("controller_user", &[("question", question), ("round_history", &history)])?;
        let template = match self.config.controller {
            ControllerKind::Mmg => prompts::CONTROLLER,
            ControllerKind::Ir => prompts::CONTROLLER_IR,
        };
        let request = ChatRequest { template: template.into(), system: self.prompts.get(template)?.to_string(), user };
        bump(calls, stage::CONTROLLER);
        let reply = match self.providers.chat(stage::CONTROLLER, &request) {
            Ok(r) => r,
            Err(e) => return Ok(Err(format!("controller: {e}"))),
        };
        let parsed = match self.config.controller {
            ControllerKind::Mmg => parse_decision(&reply).map(|d| (d, None)),
            ControllerKind::Ir => parse_ir_decision(&reply),
        };
        Ok(parsed.map_err(|e| format!("controller reply unparseable: {e}")))
    }

    fn answer_call(&self, q: &Question, context: &MergedContext, calls: &mut Calls) -> Result<Result<String, String>, AgentError> {
        let (template, choices) = match self.config.answer_mode {
            AnswerMode::MultipleChoice => (prompts::QA_MC, render_choices(&q.choices)),
            AnswerMode::Open => (prompts::QA_OPEN, String::new()),
        };
        let user = self.prompts.fill(
            "answer_user",
            &[("question", &q.question), ("choices", &choices), ("context", &context.render())],
        )?;
        let request = ChatRequest { template: template.into(), system: self.prompts.get(template)?.to_string(), user };
        bump(calls, stage::ANSWER);
        Ok(self.providers.chat(stage::ANSWER, &request).map(|a| a.trim().to_string()).map_err(|e| format!("answer: {e}")))
    }

    /// Runs the loop for one question. Provider and parse failures are
    /// recorded in the trace and count against the error budget.
    pub fn run_question(&self, q: &Question) -> Result<QuestionTrace, AgentError> {
        let started = Instant::now();
        let t = q.time.unwrap_or(Timestamp::END);
        let mut trace = QuestionTrace {
            question_id: q.id.clone(),
            question: q.question.clone(),
            time: t,
            rounds: Vec::new(),
            forced: false,
            aborted: false,
            errors: Vec::new(),
            answer: None,
            calls: Calls::new(),
            elapsed_us: 0,
        };
        let mut records: Vec<RoundRecord> = Vec::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let budget_left = |trace: &QuestionTrace| trace.errors.len() < self.config.error_budget;
        let mut answering = false;
        while !answering {
            if !budget_left(&trace) {
                trace.aborted = true;
                break;
            }
            if records.len() >= self.config.max_rounds {
                trace.forced = true;
                break;
            }
            let round_start = Instant::now();
            let mut calls = Calls::new();
            let decision = self.controller_call(&q.question, &records, &mut calls)?;
            let (decision, memory_type) = match decision {
                Ok(d) => d,
                Err(e) => {
                    trace.errors.push(e);
                    merge(&mut trace.calls, &calls);
                    continue;
                }
            };
            let Decision::Search { search_query } = &decision else {
                answering = true;
                merge(&mut trace.calls, &calls);
                continue;
            };
            let found = match (self.config.controller, memory_type) {
                (ControllerKind::Ir, Some(m)) => self.ir_search(m, search_query, t, &mut calls),
                _ => self.graph_search(search_query, t, &mut calls),
            };
            let candidates = match found {
                Ok(c) => c,
                Err(e) => {
                    trace.errors.push(format!("retrieval: {e}"));
                    merge(&mut trace.calls, &calls);
                    continue;
                }
            };
            let n = candidates.len();
            let items = dedup_round(candidates, &mut seen);
            let index = records.len() + 1;
            records.push(RoundRecord { index, decision: decision.clone(), items: items.clone(), candidates: n });
            merge(&mut trace.calls, &calls);
            trace.rounds.push(RoundTrace {
                index,
                decision,
                memory_type,
                candidates: n,
                items,
                calls,
                elapsed_us: round_start.elapsed().as_micros() as u64,
            });
        }
        if !trace.aborted {
            let context = assemble_context(&records);
            loop {
                let mut calls = Calls::new();
                let outcome = self.answer_call(q, &context, &mut calls)?;
                merge(&mut trace.calls, &calls);
                match outcome {
                    Ok(a) => {
                        trace.answer = Some(a);
                        break;
                    }
                    Err(e) => {
                        trace.errors.push(e);
                        if !budget_left(&trace) {
                            trace.aborted = true;
                            break;
                        }
                    }
                }
            }
        }
        if trace.aborted {
            log::warn!("question {}: aborted after {} tool errors", q.id, trace.errors.len());
        }
        trace.elapsed_us = started.elapsed().as_micros() as u64;
        Ok(trace)
    }

    /// Answers every question with up to `workers` in flight; traces keep
    /// question order.
    pub fn run_all(&self, questions: &[Question]) -> Result<Vec<QuestionTrace>, AgentError> {
        let width = self.config.workers.max(1);
        if width == 1 || questions.len() <= 1 {
            return questions.iter().map(|q| self.run_question(q)).collect();
        }
        let chunk = questions.len().div_ceil(width);
        std::thread::scope(|s| {
            let handles: Vec<_> = questions
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|q| self.run_question(q)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}

fn merge(into: &mut Calls, from: &Calls) {
    for (k, v) in from {
        *into.entry(k.clone()).or_insert(0) += v;
    }
}
