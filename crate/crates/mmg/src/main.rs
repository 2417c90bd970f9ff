use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmg::agent::{Agent, AnswerMode};
use mmg::artefacts::Question;
use mmg::config::Config;
use mmg::prompts::PromptLibrary;
use mmg::providers::Providers;
use mmg::synthetic::{self, SyntheticSpec};
use mmg::{eval, pipeline};
use mmg_core::Timestamp;

#[derive(Parser)]
#[command(name = "mmg", version, about = "Multimodal memory graph: build, retrieve, answer and evaluate")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use deterministic offline providers.
    #[arg(long, global = true)]
    mock: bool,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DirArg {
    /// Artefact directory.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus.
    GenSynthetic {
        #[command(flatten)]
        dir: DirArg,
        /// TOML corpus spec; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        days: Option<u32>,
        #[arg(long)]
        windows_per_day: Option<usize>,
    },
    /// Aggregate captions, extract triples and distil chains.
    Distill(DirArg),
    /// Embed node texts and write the graph.
    Build(DirArg),
    /// One retrieval pass; prints the rendered items.
    Query {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        text: String,
        /// Query time, e.g. "DAY3 12:00:00". Defaults to the end of the corpus.
        #[arg(long)]
        time: Option<String>,
    },
    /// Answer one question, or every question in questions.jsonl.
    Answer {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        question: Option<String>,
        /// Answer choices for a single question; repeat per choice.
        #[arg(long = "choice")]
        choices: Vec<String>,
        #[arg(long)]
        time: Option<String>,
        /// Trace output for batch mode.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Recall@K over a trace file.
    EvalRecall {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long, value_delimiter = ',', default_values_t = vec![16, 20, 30, 50])]
        k: Vec<usize>,
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Accuracy, recall, composition, round statistics and bootstrap CI.
    EvalStats {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Accuracy to compare against in the bootstrap.
        #[arg(long)]
        anchor: Option<f64>,
        /// Report output; defaults to report.json in the artefact directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn parse_time(s: Option<&str>) -> Result<Option<Timestamp>> {
    s.map(|s| Timestamp::parse(s).map_err(|e| anyhow!("bad --time {s:?}: {e}"))).transpose()
}

fn prompts(cli: &Cli) -> Result<PromptLibrary> {
    match &cli.prompts {
        Some(dir) => Ok(PromptLibrary::load_dir(dir)?),
        None => Ok(PromptLibrary::default()),
    }
}

fn providers(cli: &Cli, config: &Config, dir: &Path, lib: &PromptLibrary) -> Result<Providers> {
    let script = if cli.mock { pipeline::load_script(dir)? } else { Vec::new() };
    Ok(pipeline::providers(config, cli.mock, script, lib)?)
}

fn traces_path(dir: &Path, traces: &Option<PathBuf>) -> PathBuf {
    traces.clone().unwrap_or_else(|| dir.join(pipeline::TRACES))
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match &cli.command {
        Command::GenSynthetic { dir, spec, seed, days, windows_per_day } => {
            let mut s = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| p.display().to_string())?;
                    toml::from_str::<SyntheticSpec>(&text).with_context(|| p.display().to_string())?
                }
                None => SyntheticSpec::default(),
            };
            s.seed = seed.unwrap_or(s.seed);
            s.days = days.unwrap_or(s.days);
            s.windows_per_day = windows_per_day.unwrap_or(s.windows_per_day);
            let corpus = synthetic::generate(&s, config.provider.visual_dim, config.provider.mock_seed)?;
            corpus.write(&dir.dir)?;
            println!("{} windows, {} questions -> {}", s.windows(), corpus.questions.len(), dir.dir.display());
        }
        Command::Distill(dir) => {
            let lib = prompts(&cli)?;
            let p = providers(&cli, &config, &dir.dir, &lib)?;
            let summary = pipeline::distill(&dir.dir, &config, &p, &lib)?;
            for w in &summary.warnings {
                log::warn!("{w}");
            }
            print!("{}", pipeline::report_json(&summary));
        }
        Command::Build(dir) => {
            let lib = prompts(&cli)?;
            let p = providers(&cli, &config, &dir.dir, &lib)?;
            let summary = pipeline::build(&dir.dir, &config, &p)?;
            print!("{}", pipeline::report_json(&summary));
        }
        Command::Query { dir, text, time } => {
            let lib = prompts(&cli)?;
            let p = providers(&cli, &config, &dir.dir, &lib)?;
            let memory = pipeline::load_memory(&dir.dir)?;
            let t = parse_time(time.as_deref())?.unwrap_or(Timestamp::END);
            let agent = Agent::new(&memory, &p, &lib, config.ppr, config.injection, config.agent.clone());
            let mut calls = BTreeMap::new();
            let items = agent.graph_search(text, t, &mut calls)?;
            if items.is_empty() {
                println!("[No new results]");
            }
            for item in items {
                println!("{}", item.render_history());
            }
        }
        Command::Answer { dir, question, choices, time, traces } => {
            let lib = prompts(&cli)?;
            let p = providers(&cli, &config, &dir.dir, &lib)?;
            let memory = pipeline::load_memory(&dir.dir)?;
            let time = parse_time(time.as_deref())?;
            match question {
                Some(text) => {
                    let mut config = config.clone();
                    if choices.is_empty() {
                        config.agent.answer_mode = AnswerMode::Open;
                    }
                    let q = Question {
                        id: "cli".into(),
                        question: text.clone(),
                        time,
                        choices: choices.clone(),
                        answer: None,
                        kind: None,
                    };
                    let trace = pipeline::answer(&memory, std::slice::from_ref(&q), &config, &p, &lib)?.remove(0);
                    match trace.answer {
                        Some(a) => println!("{a}"),
                        None => bail!("no answer after {} errors", trace.errors.len()),
                    }
                }
                None => {
                    if !choices.is_empty() {
                        bail!("--choice needs --question");
                    }
                    let mut questions = pipeline::load_questions(&dir.dir)?;
                    if let Some(t) = time {
                        for q in &mut questions {
                            q.time = Some(t);
                        }
                    }
                    let out = pipeline::answer(&memory, &questions, &config, &p, &lib)?;
                    let path = traces_path(&dir.dir, traces);
                    pipeline::write_traces(&path, &out)?;
                    println!("{} traces -> {}", out.len(), path.display());
                }
            }
        }
        Command::EvalRecall { dir, k, traces } => {
            let traces = pipeline::read_traces(&traces_path(&dir.dir, traces))?;
            let gold = eval::gold_map(&pipeline::load_gold(&dir.dir)?)?;
            let curve = eval::recall_at_k(&traces, &gold, k);
            print!("{}", pipeline::report_json(&curve));
        }
        Command::EvalStats { dir, traces, anchor, out } => {
            let traces = pipeline::read_traces(&traces_path(&dir.dir, traces))?;
            let questions = pipeline::load_questions(&dir.dir)?;
            let gold = pipeline::load_gold(&dir.dir)?;
            let mut config = config.clone();
            if anchor.is_some() {
                config.eval.anchor = *anchor;
            }
            let report = pipeline::evaluate(&traces, &questions, &gold, &config)?;
            let json = pipeline::report_json(&report);
            let path = out.clone().unwrap_or_else(|| dir.dir.join(pipeline::REPORT));
            std::fs::write(&path, &json).with_context(|| path.display().to_string())?;
            print!("{json}");
        }
    }
    Ok(())
}
