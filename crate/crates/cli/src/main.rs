use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use metatox_core::config::RunConfig;
use metatox_core::corpus::{load_corpus, LabelMap};
use metatox_core::detect::{evaluate, load_records, run_detection, save_records, DetectContext, Mode};
use metatox_core::kg_build::build_triplets;
use metatox_core::kg_store::{merge, stats, KnowledgeGraph};
use metatox_core::query::{query_graph, Strategy};

#[derive(Parser)]
#[command(name = "metatox", version, about = "Build toxicity knowledge graphs and detect toxic speech with them")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for retry jitter and any other randomised step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one config field, e.g. `--set query.top_k=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.FIELD=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct CorpusArgs {
    /// Label mapping: a preset name (binary, hatexplain, toxicspans, ihc) or a JSON file.
    #[arg(long, default_value = "binary")]
    labels: String,
}

impl CorpusArgs {
    fn map(&self) -> Result<LabelMap> {
        let p = Path::new(&self.labels);
        if p.exists() {
            Ok(LabelMap::from_file(p)?)
        } else {
            Ok(LabelMap::preset(&self.labels)?)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a graph from the toxic samples of a corpus.
    Build {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Audit log of every rejected or removed triplet (JSONL).
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Directory for resumable per-sample checkpoints.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        corpus_args: CorpusArgs,
    },
    /// Merge two graphs and print the reduction statistics.
    Merge {
        g1: PathBuf,
        g2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print size statistics of a graph.
    Stats { graph: PathBuf },
    /// Retrieve knowledge for one text.
    Query {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        text: Option<String>,
        /// Read the text from a file.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Return every candidate triplet, unranked.
        #[arg(long)]
        no_rank_filter: bool,
    },
    /// Classify a test corpus and write per-sample records.
    Detect {
        test: PathBuf,
        #[arg(long, default_value = "metatox")]
        mode: Mode,
        /// Required for metatox mode.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Training corpus, required for naive-rag mode.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        no_rank_filter: bool,
        #[command(flatten)]
        corpus_args: CorpusArgs,
    },
    /// Recompute metrics from saved detection records.
    Eval {
        preds: PathBuf,
        gold: PathBuf,
        #[command(flatten)]
        corpus_args: CorpusArgs,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn load_config(global: &Global, extra: Vec<(String, String)>) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for o in &global.overrides {
        overrides.push(RunConfig::parse_override(o)?);
    }
    if let Some(seed) = global.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.extend(extra);
    let config = RunConfig::resolve(global.config.as_deref(), std::env::vars(), &overrides)?;
    config.check_paths()?;
    Ok(config)
}

fn query_overrides(strategy: Option<Strategy>, no_rank_filter: bool) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if let Some(s) = strategy {
        let name = match s {
            Strategy::ShortestPath => "shortest-path",
            Strategy::OneHop => "one-hop",
        };
        out.push(("query.strategy".into(), name.into()));
    }
    if no_rank_filter {
        out.push(("query.rank_filter".into(), "false".into()));
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build { corpus, out, audit, checkpoint, corpus_args } => {
            let config = load_config(&cli.global, vec![])?;
            require(&corpus, "corpus")?;
            let samples = load_corpus(&corpus, &corpus_args.map()?)?;
            let gw = config.gateway()?;
            let embedder = config.embedder()?;
            let output = build_triplets(&samples, &gw, embedder.as_ref(), &config.build, checkpoint.as_deref())?;
            embedder.flush()?;
            KnowledgeGraph::from_triplets(output.triplets).save(&out)?;
            if let Some(path) = audit {
                let mut text = String::new();
                for e in &output.audit {
                    text.push_str(&serde_json::to_string(e)?);
                    text.push('\n');
                }
                std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            print_json(&output.report)?;
            if output.report.deferred_samples > 0 {
                bail!(
                    "{} samples failed on provider errors; rerun with --checkpoint to retry only those",
                    output.report.deferred_samples
                );
            }
            Ok(())
        }
        Command::Merge { g1, g2, out } => {
            let config = load_config(&cli.global, vec![])?;
            let a = KnowledgeGraph::load(&g1)?;
            let b = KnowledgeGraph::load(&g2)?;
            let embedder = config.embedder()?;
            let (merged, merge_stats) =
                merge(&a, &b, embedder.as_ref(), config.build.entity_threshold, config.build.relation_threshold)?;
            merged.save(&out)?;
            embedder.flush()?;
            print_json(&merge_stats)
        }
        Command::Stats { graph } => {
            load_config(&cli.global, vec![])?;
            print_json(&stats(&KnowledgeGraph::load(&graph)?))
        }
        Command::Query { graph, text, file, strategy, no_rank_filter } => {
            let config = load_config(&cli.global, query_overrides(strategy, no_rank_filter))?;
            let text = match (text, file) {
                (Some(t), _) => t,
                (None, Some(f)) => std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?.trim().to_string(),
                (None, None) => bail!("one of --text or --file is required"),
            };
            let g = KnowledgeGraph::load(&graph)?;
            let gw = config.gateway()?;
            let embedder = config.embedder()?;
            let knowledge = query_graph(&text, &g, &gw, embedder.as_ref(), &config.query)?;
            embedder.flush()?;
            print_json(&knowledge)
        }
        Command::Detect { test, mode, graph, train, out, strategy, no_rank_filter, corpus_args } => {
            let config = load_config(&cli.global, query_overrides(strategy, no_rank_filter))?;
            let labels = corpus_args.map()?;
            require(&test, "test corpus")?;
            let test_samples = load_corpus(&test, &labels)?;
            let gw = config.gateway()?;
            let embedder = config.embedder()?;
            let (graph_store, train_samples);
            let context = match mode {
                Mode::Vanilla => DetectContext::Vanilla,
                Mode::NaiveRag => {
                    let path = train.context("--train is required for naive-rag mode")?;
                    train_samples = load_corpus(&path, &labels)?;
                    DetectContext::NaiveRag { train: &train_samples }
                }
                Mode::Metatox => {
                    let path = graph.context("--graph is required for metatox mode")?;
                    graph_store = KnowledgeGraph::load(&path)?;
                    DetectContext::Metatox { graph: &graph_store, query: config.query.clone() }
                }
            };
            let (records, metrics) = run_detection(&test_samples, &context, &gw, embedder.as_ref(), &config.detect)?;
            embedder.flush()?;
            save_records(&out, &records)?;
            print_json(&metrics)
        }
        Command::Eval { preds, gold, corpus_args } => {
            load_config(&cli.global, vec![])?;
            let records = load_records(&preds)?;
            let gold = load_corpus(&gold, &corpus_args.map()?)?;
            print_json(&evaluate(&records, &gold)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
