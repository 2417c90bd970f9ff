//! Host side of the multimodal memory graph: on-disk graph format, artefact
//! IO, model providers, offline distillation, the agentic answering loop,
//! evaluation and synthetic corpora.

pub mod agent;
pub mod artefacts;
pub mod config;
pub mod distill;
pub mod eval;
pub mod jsonx;
pub mod mock;
pub mod persist;
pub mod pipeline;
pub mod prompts;
pub mod providers;
pub mod synthetic;
