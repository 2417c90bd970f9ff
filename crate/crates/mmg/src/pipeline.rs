//! Directory-level stages shared by the CLI and the tests: distill, build,
//! load, answer and evaluate over one artefact directory.

use std::collections::BTreeMap;
use std::path::Path;

use mmg_core::{build_graph, BuildError, Granularity};
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentError, Memory, QuestionTrace};
use crate::artefacts::{self, ArtefactError, EmbeddingSlot, EmbeddingStore, Question};
use crate::config::Config;
use crate::distill::{DistillCounts, DistillError, Distiller, ReplyCache};
use crate::eval::{self, EvalError, EvalReport, GoldSpan};
use crate::mock::ScriptRule;
use crate::persist::{self, PersistError};
use crate::prompts::PromptLibrary;
use crate::providers::{ProviderError, Providers};

pub const TRACES: &str = "traces.jsonl";
pub const REPORT: &str = "report.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Artefact(#[from] ArtefactError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("graph build failed: {0}")]
    Build(#[from] BuildError),
    #[error("{stage}: {source}")]
    Provider { stage: &'static str, source: ProviderError },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Mock or HTTP providers with every library template registered. The mock
/// chat follows `script` first.
pub fn providers(config: &Config, mock: bool, script: Vec<ScriptRule>, prompts: &PromptLibrary) -> Result<Providers, ProviderError> {
    let mut p = if mock { Providers::mock(&config.provider, script) } else { Providers::http(&config.provider)? };
    p.register_templates(prompts.names().collect::<Vec<_>>());
    Ok(p)
}

/// The provider script in `dir`, if any.
pub fn load_script(dir: &Path) -> Result<Vec<ScriptRule>, ArtefactError> {
    artefacts::read_jsonl_opt(&dir.join(artefacts::SCRIPT))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub captions: BTreeMap<String, usize>,
    pub mentions: usize,
    pub triples: usize,
    pub counts: DistillCounts,
    pub warnings: Vec<String>,
}

/// Distils the 30 s captions in `dir` and writes every derived artefact.
/// Replies are cached under `dir/cache`.
pub fn distill(dir: &Path, config: &Config, providers: &Providers, prompts: &PromptLibrary) -> Result<DistillSummary, PipelineError> {
    let captions: Vec<mmg_core::CaptionRow> = artefacts::read_jsonl(&dir.join(artefacts::CAPTIONS))?;
    let distiller = Distiller::new(providers, prompts, ReplyCache::new(Some(dir.join(artefacts::CACHE_DIR))), config.distill.clone());
    let out = distiller.run(&captions)?;
    artefacts::write_jsonl(&dir.join(artefacts::CAPTIONS), &out.captions)?;
    artefacts::write_jsonl(&dir.join(artefacts::MENTIONS), &out.mentions)?;
    artefacts::write_jsonl(&dir.join(artefacts::TRIPLES), &out.triples)?;
    let mut store = EmbeddingStore::load(dir)?;
    store.vectors.retain(|(slot, _), _| *slot == EmbeddingSlot::Visual);
    artefacts::write_chains(dir, &out.chains, &mut store)?;
    store.save(dir)?;
    let mut by_level = BTreeMap::new();
    for c in &out.captions {
        *by_level.entry(c.granularity.label().to_string()).or_insert(0) += 1;
    }
    for g in Granularity::ALL {
        by_level.entry(g.label().to_string()).or_insert(0);
    }
    Ok(DistillSummary {
        captions: by_level,
        mentions: out.mentions.len(),
        triples: out.triples.len(),
        counts: out.counts,
        warnings: out.warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub nodes: usize,
    pub edges: usize,
    /// Text embeddings computed in this run (the rest were cached).
    pub embedded: usize,
    pub warnings: Vec<String>,
}

/// Embeds missing node texts, builds the graph and writes `graph.mmg`.
pub fn build(dir: &Path, config: &Config, providers: &Providers) -> Result<BuildSummary, PipelineError> {
    let mut store = EmbeddingStore::load(dir)?;
    let mut bundle = artefacts::load_bundle(dir, &store)?;
    let missing: Vec<(mmg_core::NodeId, String)> =
        bundle.embedding_inputs().into_iter().filter(|(id, _)| !bundle.text_embeddings.contains_key(id)).collect();
    if !missing.is_empty() {
        let texts: Vec<String> = missing.iter().map(|(_, t)| t.clone()).collect();
        let vectors = providers
            .embed_text_batched(&texts, config.distill.embed_batch)
            .map_err(|source| PipelineError::Provider { stage: "embed node texts", source })?;
        for ((id, _), v) in missing.iter().zip(vectors) {
            store.insert(EmbeddingSlot::Text, id.as_str(), v.clone());
            bundle.text_embeddings.insert(id.clone(), v);
        }
        store.save(dir)?;
    }
    let out = build_graph(&bundle, &config.build)?;
    persist::save(&out.graph, &dir.join(artefacts::GRAPH))?;
    Ok(BuildSummary {
        nodes: out.graph.node_count(),
        edges: out.graph.edge_count(),
        embedded: missing.len(),
        warnings: out.warnings.iter().map(|w| format!("{w:?}")).collect(),
    })
}

pub fn load_memory(dir: &Path) -> Result<Memory, PipelineError> {
    let graph = persist::load(&dir.join(artefacts::GRAPH))?;
    let store = EmbeddingStore::load(dir)?;
    let chains = artefacts::read_chains(dir, &store)?;
    Ok(Memory { graph, chains })
}

pub fn load_questions(dir: &Path) -> Result<Vec<Question>, ArtefactError> {
    artefacts::read_jsonl(&dir.join(artefacts::QUESTIONS))
}

pub fn load_gold(dir: &Path) -> Result<Vec<GoldSpan>, ArtefactError> {
    artefacts::read_jsonl_opt(&dir.join(artefacts::GOLD))
}

pub fn answer(
    memory: &Memory,
    questions: &[Question],
    config: &Config,
    providers: &Providers,
    prompts: &PromptLibrary,
) -> Result<Vec<QuestionTrace>, PipelineError> {
    let agent = Agent::new(memory, providers, prompts, config.ppr, config.injection, config.agent.clone());
    Ok(agent.run_all(questions)?)
}

pub fn write_traces(path: &Path, traces: &[QuestionTrace]) -> Result<(), ArtefactError> {
    artefacts::write_jsonl(path, traces)
}

pub fn read_traces(path: &Path) -> Result<Vec<QuestionTrace>, ArtefactError> {
    artefacts::read_jsonl(path)
}

pub fn evaluate(traces: &[QuestionTrace], questions: &[Question], gold: &[GoldSpan], config: &Config) -> Result<EvalReport, PipelineError> {
    let gold = eval::gold_map(gold)?;
    Ok(eval::evaluate(traces, questions, &gold, config.agent.answer_mode, config.agent.max_rounds, &config.eval)?)
}

/// Pretty JSON with a trailing newline.
pub fn report_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}
