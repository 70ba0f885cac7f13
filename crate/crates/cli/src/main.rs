//! `rolecheck` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on a domain error (the structured error name
//! is printed first), 2 on a usage error.

mod config;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use rolecheck_core::inject::{SubDisciplineRegistry, DEFAULT_INTERROGATIVES};
use rolecheck_core::pipeline::{self, Engine, RunRequest, Workspace};
use rolecheck_core::prompts::TemplateSet;
use rolecheck_core::provider::http::HttpBackend;
use rolecheck_core::provider::mock::MockBackend;
use rolecheck_core::provider::{Backend, EndpointKind, Provider, RoutingBackend};
use rolecheck_core::report::{self, Layout, ReportFormat};
use rolecheck_core::screening::{AutoRules, ItemKind};
use rolecheck_core::strategies::{CaseBank, StrategyKind, StrategySpec};
use rolecheck_core::{dataset::ProbingDataset, jsonl, judge, Error};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "rolecheck", version, about = "Probe role-playing models for character knowledge errors")]
struct Cli {
    /// Config file (endpoints, paths, seed).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured workspace directory.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Overrides the configured response cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load character profiles and their corpora.
    Ingest {
        /// Profile JSON files.
        #[arg(required = true)]
        profiles: Vec<PathBuf>,
        /// Corpus text overriding the profile's corpus_path (single profile only).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Split every ingested corpus into chunks.
    Chunk {
        #[arg(long)]
        target_sentences: Option<usize>,
    },
    /// Extract categorized memories from every chunk.
    GenMemories {
        #[arg(long)]
        constructor: String,
    },
    /// Inject a KKE and a UKE false memory into every kept memory.
    Inject {
        #[arg(long)]
        constructor: String,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Rewrite injected memories as second-person questions.
    Transform {
        #[arg(long)]
        constructor: String,
    },
    /// Serve the screening API (and UI bundle) for annotators.
    Review {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory with the review UI bundle.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Close a screening round and write statuses back.
    Finalize {
        #[arg(long, value_parser = parse_kind)]
        kind: ItemKind,
        #[arg(long)]
        required: Option<usize>,
        /// Script verdicts from a rules file before finalizing.
        #[arg(long)]
        auto_annotator: Option<PathBuf>,
    },
    /// Assemble the probing dataset from kept query pairs.
    BuildDataset {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print dataset statistics.
    Stats {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "markdown", value_parser = ["markdown", "json"])]
        format: String,
    },
    /// Embed every character's chunks into a retrieval index.
    EmbedIndex {
        #[arg(long)]
        embedder: String,
    },
    /// Run one reasoning strategy over a dataset.
    Run(RunArgs),
    /// Judge a run's responses and score them.
    Judge {
        #[arg(long)]
        run: String,
        #[arg(long)]
        judge: String,
        /// Must match the run's trial count if given.
        #[arg(long)]
        trials: Option<u32>,
    },
    /// Render accuracy tables for one or more judged runs.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<String>,
        #[arg(long, default_value = "markdown", value_parser = parse_format)]
        format: ReportFormat,
        #[arg(long, default_value = "errors", value_parser = parse_layout)]
        layout: Layout,
        /// Append dataset statistics (markdown only).
        #[arg(long)]
        stats: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw judgments for a human spot-check of the judge.
    AuditSample {
        #[arg(long)]
        run: String,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: StrategyKind,
    #[arg(long)]
    responder: String,
    /// Embedding endpoint for rag, rag_few_shot and s2rd.
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long, default_value_t = 1)]
    trials: u32,
    /// Defaults to `<strategy>-<responder>`.
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    case_bank: Option<PathBuf>,
    #[arg(long)]
    k_retrieval: Option<usize>,
    #[arg(long)]
    m_seeds: Option<usize>,
    #[arg(long)]
    k_per_seed: Option<usize>,
}

fn parse_kind(s: &str) -> Result<ItemKind, String> {
    s.parse()
}
fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse()
}
fn parse_layout(s: &str) -> Result<Layout, String> {
    s.parse()
}
fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse()
}

struct Ctx {
    cfg: RunConfig,
    ws: Workspace,
    cache_dir: PathBuf,
}

impl Ctx {
    fn engine(&self) -> Result<Engine, Error> {
        let http: Arc<dyn Backend> = Arc::new(
            HttpBackend::new(std::time::Duration::from_secs(self.cfg.request_timeout_secs))
                .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?,
        );
        let mock_ids: Vec<&str> = self
            .cfg
            .endpoints
            .iter()
            .filter(|e| e.base_url.starts_with("mock://"))
            .map(|e| e.id.as_str())
            .collect();
        let backend: Arc<dyn Backend> = if mock_ids.is_empty() {
            http
        } else {
            let script = self.cfg.mock_script.as_ref().ok_or_else(|| {
                Error::Config(format!("endpoint '{}' uses mock:// but no mock_script is configured", mock_ids[0]))
            })?;
            let mock: Arc<dyn Backend> =
                Arc::new(MockBackend::from_file(script).map_err(|e| Error::Config(e.to_string()))?);
            let routed = mock_ids
                .iter()
                .fold(RoutingBackend::new(http), |r, id| r.route(id, mock.clone()));
            Arc::new(routed)
        };
        let provider = Provider::new(backend).with_cache_dir(&self.cache_dir)?;
        let templates = match &self.cfg.template_dir {
            Some(dir) => TemplateSet::load(dir)?,
            None => TemplateSet::default(),
        };
        Ok(Engine {
            provider,
            templates,
            endpoints: self.cfg.endpoint_map(),
            workers: self.cfg.workers,
        })
    }

    fn case_bank(&self, flag: Option<&Path>) -> Result<Option<CaseBank>, Error> {
        match flag.or(self.cfg.case_bank.as_deref()) {
            Some(p) => Ok(Some(CaseBank::load(p)?)),
            None => Ok(None),
        }
    }

    fn dataset_path(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.unwrap_or_else(|| self.ws.dataset())
    }
}

fn emit(out: Option<&Path>, body: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let (config_path, explicit) = match &cli.config {
        Some(p) => (p.clone(), true),
        None => (PathBuf::from("rolecheck.toml"), false),
    };
    let mut cfg = RunConfig::load(&config_path, explicit)?;
    if let Some(ws) = cli.workspace {
        cfg.workspace = ws;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let cache_dir = cli
        .cache_dir
        .or_else(|| cfg.cache_dir.clone())
        .unwrap_or_else(|| cfg.workspace.join("cache"));
    let ctx = Ctx {
        ws: Workspace::new(&cfg.workspace),
        cfg,
        cache_dir,
    };
    let ws = &ctx.ws;

    match cli.command {
        Command::Ingest { profiles, corpus } => {
            if corpus.is_some() && profiles.len() != 1 {
                return Err(Error::Config("--corpus needs exactly one profile".into()).into());
            }
            let pairs: Vec<_> = profiles.into_iter().map(|p| (p, corpus.clone())).collect();
            let all = pipeline::ingest(ws, &pairs)?;
            println!("{} characters in {}", all.len(), ws.characters().display());
        }
        Command::Chunk { target_sentences } => {
            let target = target_sentences.unwrap_or(ctx.cfg.chunking.target_sentences);
            let chunks = pipeline::chunk(ws, target)?;
            println!("{} chunks", chunks.len());
        }
        Command::GenMemories { constructor } => {
            let engine = ctx.engine()?;
            let memories = pipeline::gen_memories(ws, &engine, &constructor)?;
            println!("{} memories queued for screening", memories.len());
        }
        Command::Inject { constructor, registry } => {
            let engine = ctx.engine()?;
            let registry = match registry.or(ctx.cfg.registry.clone()) {
                Some(p) => SubDisciplineRegistry::load(&p)?,
                None => SubDisciplineRegistry::default(),
            };
            let (drafts, failures) = pipeline::inject(ws, &engine, &constructor, &registry, ctx.cfg.seed)?;
            println!("{} drafts, {} failures", drafts.len(), failures.len());
        }
        Command::Transform { constructor } => {
            let engine = ctx.engine()?;
            let owned: Vec<String>;
            let allow: Vec<&str> = match &ctx.cfg.screening.interrogatives {
                Some(words) => {
                    owned = words.clone();
                    owned.iter().map(String::as_str).collect()
                }
                None => DEFAULT_INTERROGATIVES.to_vec(),
            };
            let (queries, failures) = pipeline::transform(ws, &engine, &constructor, &allow)?;
            println!("{} queries queued for screening, {} failures", queries.len(), failures.len());
        }
        Command::Review { addr, static_dir } => {
            let store = ws.open_screening(ctx.cfg.screening.annotators.clone())?;
            let state = rolecheck_review::ReviewState::new(store, ctx.cfg.screening.required_annotators);
            rolecheck_review::serve(addr, state, static_dir)?;
        }
        Command::Finalize {
            kind,
            required,
            auto_annotator,
        } => {
            let mut roster = ctx.cfg.screening.annotators.clone();
            if let Some(path) = auto_annotator {
                let rules = AutoRules::load(&path)?;
                let n = pipeline::auto_annotate(ws, &rules, kind)?;
                log::info!("auto-annotator recorded {n} verdicts");
                if roster.is_empty() {
                    roster = rules.annotators.clone();
                }
            }
            let required = required.unwrap_or(ctx.cfg.screening.required_annotators);
            let report = pipeline::finalize(ws, kind, required, roster)?;
            println!(
                "{}: {} items, kept by all {}, kept by any {}, overlap {:.1}%",
                kind.as_str(),
                report.n_items,
                report.kept_all,
                report.kept_any,
                report.overlap_ratio * 100.0
            );
        }
        Command::BuildDataset { out } => {
            let engine_templates = match &ctx.cfg.template_dir {
                Some(dir) => TemplateSet::load(dir)?,
                None => TemplateSet::default(),
            };
            let ds = pipeline::build_dataset(ws, &engine_templates, ctx.cfg.seed)?;
            if let Some(out) = out {
                ds.save(&out)?;
            }
            println!("{} records", ds.records.len());
        }
        Command::Stats { dataset, format } => {
            let stats = pipeline::stats(&ctx.dataset_path(dataset))?;
            if format == "json" {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{}", report::markdown_stats(&stats));
            }
        }
        Command::EmbedIndex { embedder } => {
            let engine = ctx.engine()?;
            let indexes = pipeline::embed_index(ws, &engine, &embedder)?;
            println!("{} indexes", indexes.len());
        }
        Command::Run(args) => {
            let engine = ctx.engine()?;
            let mut spec = StrategySpec::new(args.strategy, &args.responder);
            spec.k_retrieval = args.k_retrieval.unwrap_or(spec.k_retrieval);
            spec.m_seeds = args.m_seeds.unwrap_or(spec.m_seeds);
            spec.k_per_seed = args.k_per_seed.unwrap_or(spec.k_per_seed);
            let embedder = match args.embedder {
                Some(id) => Some(id),
                None if args.strategy.needs_index() => {
                    let embedders: Vec<&str> = ctx
                        .cfg
                        .endpoints
                        .iter()
                        .filter(|e| e.kind == EndpointKind::Embedding)
                        .map(|e| e.id.as_str())
                        .collect();
                    match embedders.as_slice() {
                        [one] => Some(one.to_string()),
                        _ => return Err(Error::Config(format!("{} needs --embedder", args.strategy.as_str())).into()),
                    }
                }
                None => None,
            };
            let bank = if args.strategy.needs_cases() {
                ctx.case_bank(args.case_bank.as_deref())?
            } else {
                None
            };
            let run_id = args
                .run_id
                .unwrap_or_else(|| format!("{}-{}", args.strategy.as_str(), args.responder));
            let dataset = ctx.dataset_path(args.dataset);
            let (records, failures) = pipeline::run(
                ws,
                &engine,
                &RunRequest {
                    run_id: &run_id,
                    dataset_path: &dataset,
                    spec,
                    embedder: embedder.as_deref(),
                    case_bank: bank.as_ref(),
                    trials: args.trials,
                    seed: ctx.cfg.seed,
                },
            )?;
            println!("run {run_id}: {} responses, {} failures", records.len(), failures.len());
        }
        Command::Judge { run, judge, trials } => {
            let engine = ctx.engine()?;
            if let Some(t) = trials {
                let manifest = ws.run(&run).load_manifest()?;
                if manifest.trials != t {
                    return Err(Error::Config(format!(
                        "run '{run}' has {} trials, --trials says {t}",
                        manifest.trials
                    ))
                    .into());
                }
            }
            let (judgments, table) = pipeline::judge_run(ws, &engine, &run, &judge)?;
            let invalid = judgments.iter().filter(|j| j.verdict == judge::Verdict::Invalid).count();
            println!(
                "{} judgments ({invalid} invalid); overall accuracy {}",
                judgments.len(),
                report::format_cell(table.overall.accuracy_mean, table.overall.sem)
            );
        }
        Command::Report {
            runs,
            format,
            layout,
            stats,
            out,
        } => {
            let doc = pipeline::report(ws, &runs, format, layout, stats)?;
            emit(out.as_deref(), &doc.body)?;
        }
        Command::AuditSample { run, n, out } => {
            let run_dir = ws.run(&run);
            let manifest = run_dir.load_manifest()?;
            let ds = ProbingDataset::load(Path::new(&manifest.dataset))?;
            let judgments: Vec<judge::Judgment> = jsonl::read(&run_dir.judgments())?;
            let records = jsonl::read(&run_dir.responses())?;
            let rows = judge::audit_sample(&judgments, &records, &ds.records, n, ctx.cfg.seed);
            emit(out.as_deref(), &jsonl::to_string(&rows)?)?;
        }
    }
    Ok(())
}

/// The structured name of the first domain error in the chain.
fn error_name(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.name();
        }
        if let Some(e) = cause.downcast_ref::<rolecheck_review::ReviewError>() {
            return e.name();
        }
    }
    "Error"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err:#}", error_name(&err));
            ExitCode::from(1)
        }
    }
}
