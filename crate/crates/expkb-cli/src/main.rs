use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use expkb::builder::{build_kb, load_raw_logs, FewShotExemplar, LogResult};
use expkb::evolution::{apply_prune, EvolutionConfig};
use expkb::pipeline::script::PipelineScript;
use expkb::pipeline::{run_pipeline, Executor, FeedbackPool, PipelineInput, Reasoner};
use expkb::records::load_records;
use expkb::retrieval::{KbIndex, RetrievalMode, RetrievalResult};
use expkb::semantic::{EmbeddingProvider, HashEmbedder};
use expkb_cli::adapters::{HttpEmbedder, HttpExecutor, HttpReasoner};
use expkb_cli::config::ServiceConfig;
use expkb_cli::query::{run_retrieve, Phase, RetrieveRequest};
use expkb_cli::{open_or_new_kb, persist_kb_atomic, service};

#[derive(Parser)]
#[command(
    name = "expkb",
    version,
    about = "Experience knowledge base engine: build, query, evolve, serve."
)]
struct Cli {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Knowledge-base file; overrides the config's data directory location.
    #[arg(long, global = true)]
    kb: Option<PathBuf>,
    /// Output format. Machine-readable mode emits one JSON object per line.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Student,
    Teacher,
    Adaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Text,
    Semantic,
    Hybrid,
}

#[derive(Subcommand)]
enum Command {
    /// Distill raw agent execution logs into knowledge-base experiences.
    Build {
        /// Raw execution logs, one JSON object per line.
        #[arg(long)]
        logs: PathBuf,
        /// Script file supplying reasoner replies; without it a configured
        /// reasoner endpoint is required.
        #[arg(long)]
        script: Option<PathBuf>,
        /// JSON array of few-shot exemplars for the generation prompt.
        #[arg(long)]
        exemplars: Option<PathBuf>,
    },
    /// Load experience records (the persistence format) into the base.
    Ingest {
        /// Experience records, one JSON object per line.
        #[arg(long)]
        records: PathBuf,
    },
    /// Run one retrieval query.
    Retrieve {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Result budget override.
        #[arg(long)]
        k: Option<usize>,
        /// Reasoning trace text (student phase).
        #[arg(long, default_value = "")]
        trace: String,
        #[arg(long, default_value = "")]
        problem: String,
        #[arg(long)]
        goal: Option<String>,
        /// Step text; repeat the flag for several. Summary steps for the
        /// teacher phase, query steps for the adaptive phase.
        #[arg(long = "step")]
        steps: Vec<String>,
        /// Refinement stage for the adaptive lambda schedule.
        #[arg(long, default_value_t = 0)]
        t: u32,
        /// Only consider experiences carrying exactly this domain.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Run the two-round pipeline against a scripted or configured executor.
    Pipeline {
        #[arg(long)]
        query: String,
        /// Expected answer; consulted only when the supervised gate is on.
        #[arg(long)]
        expected: Option<String>,
        /// Script file with reasoner replies and executor runs.
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Remove experiences whose utility fell to or below the threshold.
    Prune {
        /// Evaluation timestamp; defaults to the current unix time.
        #[arg(long)]
        now: Option<i64>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        decay_rate: Option<f64>,
    },
    /// Report knowledge-base size and quality statistics.
    Stats,
    /// Serve the HTTP endpoints.
    Serve {
        /// Bind address override.
        #[arg(long)]
        bind: Option<String>,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    let kb_path = cli.kb.clone().unwrap_or_else(|| config.kb_file());

    match cli.command {
        Command::Build {
            logs,
            script,
            exemplars,
        } => build_command(&config, &kb_path, cli.format, &logs, script.as_deref(), exemplars.as_deref()),
        Command::Ingest { records } => ingest_command(&kb_path, cli.format, &records),
        Command::Retrieve {
            phase,
            mode,
            k,
            trace,
            problem,
            goal,
            steps,
            t,
            domain,
        } => {
            let request = RetrieveRequest {
                phase: match phase {
                    PhaseArg::Student => Phase::Student,
                    PhaseArg::Teacher => Phase::Teacher,
                    PhaseArg::Adaptive => Phase::Adaptive,
                },
                mode: mode.map(|m| match m {
                    ModeArg::Text => RetrievalMode::Text,
                    ModeArg::Semantic => RetrievalMode::Semantic,
                    ModeArg::Hybrid => RetrievalMode::Hybrid,
                }),
                k,
                reason_trace: trace,
                problem,
                goal,
                summary_steps: steps.clone(),
                steps,
                t,
                domain,
            };
            retrieve_command(&config, &kb_path, cli.format, &request)
        }
        Command::Pipeline {
            query,
            expected,
            script,
        } => pipeline_command(&config, &kb_path, cli.format, query, expected, script.as_deref()),
        Command::Prune {
            now,
            threshold,
            decay_rate,
        } => prune_command(&config, &kb_path, cli.format, now, threshold, decay_rate),
        Command::Stats => stats_command(&kb_path, cli.format),
        Command::Serve { bind } => serve_command(config, cli.kb.clone(), bind),
    }
}

fn provider_from(config: &ServiceConfig) -> anyhow::Result<Arc<dyn EmbeddingProvider>> {
    Ok(match &config.embedding {
        Some(endpoint) => Arc::new(HttpEmbedder::new(endpoint)?),
        None => Arc::new(HashEmbedder::new(config.stub_embedding_dim)),
    })
}

fn load_script(path: &Path) -> anyhow::Result<PipelineScript> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading script {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing script {}", path.display()))
}

fn unix_now() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

fn emit_line<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{}", serde_json::to_string(value)?) {
        // Machine-readable output is routinely piped into head or jq; a
        // closed pipe is the consumer saying "enough", not a failure.
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        return Err(e.into());
    }
    Ok(())
}

fn build_command(
    config: &ServiceConfig,
    kb_path: &Path,
    format: Format,
    logs_path: &Path,
    script: Option<&Path>,
    exemplars: Option<&Path>,
) -> anyhow::Result<()> {
    let file = std::fs::File::open(logs_path)
        .with_context(|| format!("opening logs {}", logs_path.display()))?;
    let (logs, line_errors) = load_raw_logs(std::io::BufReader::new(file))?;
    if let Some(first) = line_errors.first() {
        anyhow::bail!("bad log at line {}: {}", first.line, first.message);
    }

    let exemplar_pool: Vec<FewShotExemplar> = match exemplars {
        None => Vec::new(),
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("reading exemplars {}", path.display()))?;
            serde_json::from_str(&raw)
                .with_context(|| format!("parsing exemplars {}", path.display()))?
        }
    };

    let scripted = script.map(load_script).transpose()?;
    let reasoner: Arc<dyn Reasoner> = match &scripted {
        Some(s) => Arc::new(s.instantiate()?.0),
        None => match &config.reasoner {
            Some(endpoint) => Arc::new(HttpReasoner::new(endpoint)?),
            None => anyhow::bail!("build needs --script or a configured reasoner endpoint"),
        },
    };

    let mut kb = open_or_new_kb(kb_path)?;
    let report = build_kb(
        &mut kb,
        provider_from(config)?,
        reasoner.as_ref(),
        &logs,
        &exemplar_pool,
        &config.build,
        unix_now(),
    )?;
    persist_kb_atomic(kb_path, &kb)?;

    match format {
        Format::Jsonl => {
            for outcome in &report.outcomes {
                emit_line(outcome)?;
            }
        }
        Format::Table => {
            for outcome in &report.outcomes {
                match &outcome.result {
                    LogResult::Accepted { id, warnings } => {
                        let notes = if warnings.is_empty() {
                            String::new()
                        } else {
                            format!("  ({})", warnings.join("; "))
                        };
                        println!("log {:>3}  accepted  {}{notes}", outcome.log_index + 1, id.as_str());
                    }
                    LogResult::Rejected { reasons } => {
                        println!(
                            "log {:>3}  rejected  {}",
                            outcome.log_index + 1,
                            reasons.join("; ")
                        );
                    }
                }
            }
            println!(
                "accepted {} rejected {} -> {}",
                report.accepted,
                report.rejected,
                kb_path.display()
            );
        }
    }
    Ok(())
}

fn ingest_command(kb_path: &Path, format: Format, records_path: &Path) -> anyhow::Result<()> {
    let file = std::fs::File::open(records_path)
        .with_context(|| format!("opening records {}", records_path.display()))?;
    let report = load_records(file)?;
    if let Some(first) = report.line_errors.first() {
        anyhow::bail!("bad record at line {}: {}", first.line, first.message);
    }

    let mut kb = open_or_new_kb(kb_path)?;
    let mut ingested = 0usize;
    for experience in report.experiences {
        kb.restore(experience)?;
        ingested += 1;
    }
    persist_kb_atomic(kb_path, &kb)?;

    match format {
        Format::Jsonl => emit_line(&serde_json::json!({
            "ingested": ingested,
            "entries": kb.len(),
        }))?,
        Format::Table => println!("ingested {ingested} records, {} entries total", kb.len()),
    }
    Ok(())
}

fn retrieve_command(
    config: &ServiceConfig,
    kb_path: &Path,
    format: Format,
    request: &RetrieveRequest,
) -> anyhow::Result<()> {
    let kb = expkb_cli::load_kb_strict(kb_path)?;
    let index = KbIndex::build(kb.snapshot(), provider_from(config)?)?;
    let result = run_retrieve(&index, &config.retrieval, request)?;
    print_retrieval(format, &result)
}

fn print_retrieval(format: Format, result: &RetrievalResult) -> anyhow::Result<()> {
    match format {
        Format::Jsonl => emit_line(result)?,
        Format::Table => {
            println!("phase {}  mode {}  query {}", result.phase, result.mode, result.query_echo);
            println!("{:<5} {:<10} {:>10} {:>9}", "rank", "id", "score", "quality");
            for (rank, item) in result.items.iter().enumerate() {
                println!(
                    "{:<5} {:<10} {:>10.6} {:>9.4}",
                    rank + 1,
                    item.id.as_str(),
                    item.score,
                    item.quality
                );
            }
        }
    }
    Ok(())
}

fn pipeline_command(
    config: &ServiceConfig,
    kb_path: &Path,
    format: Format,
    query: String,
    expected: Option<String>,
    script: Option<&Path>,
) -> anyhow::Result<()> {
    let kb = expkb_cli::load_kb_strict(kb_path)?;
    let index = KbIndex::build(kb.snapshot(), provider_from(config)?)?;
    let input = PipelineInput {
        query,
        expected_answer: expected,
    };
    let mut pool = FeedbackPool::default();

    let report = match script {
        Some(path) => {
            let (reasoner, executor) = load_script(path)?.instantiate()?;
            run_pipeline(&index, &reasoner, &executor, &config.pipeline, &input, &mut pool)?
        }
        None => {
            let reasoner: Arc<dyn Reasoner> = match &config.reasoner {
                Some(endpoint) => Arc::new(HttpReasoner::new(endpoint)?),
                None => anyhow::bail!("pipeline needs --script or a configured reasoner endpoint"),
            };
            let executor: Arc<dyn Executor> = match &config.executor {
                Some(endpoint) => Arc::new(HttpExecutor::new(endpoint)?),
                None => anyhow::bail!("pipeline needs --script or a configured executor endpoint"),
            };
            run_pipeline(
                &index,
                reasoner.as_ref(),
                executor.as_ref(),
                &config.pipeline,
                &input,
                &mut pool,
            )?
        }
    };

    match format {
        Format::Jsonl => emit_line(&report)?,
        Format::Table => {
            println!(
                "round 1: {} steps, answer {}",
                report.round_one.plan.steps.len(),
                report.round_one.answer.as_deref().unwrap_or("(none)")
            );
            match &report.teacher {
                Some(teacher) => println!(
                    "round 2: {} steps after {} hints, answer {}",
                    teacher.outcome.plan.steps.len(),
                    teacher.guidance.hints.len(),
                    teacher.outcome.answer.as_deref().unwrap_or("(none)")
                ),
                None => println!("round 2: skipped (supervised gate)"),
            }
        }
    }
    Ok(())
}

fn prune_command(
    config: &ServiceConfig,
    kb_path: &Path,
    format: Format,
    now: Option<i64>,
    threshold: Option<f64>,
    decay_rate: Option<f64>,
) -> anyhow::Result<()> {
    let mut kb = expkb_cli::load_kb_strict(kb_path)?;
    let now = now.unwrap_or_else(unix_now);
    let evolution = EvolutionConfig {
        prune_threshold: threshold.unwrap_or(config.evolution.prune_threshold),
        decay_rate: decay_rate.unwrap_or(config.evolution.decay_rate),
        ..config.evolution.clone()
    };
    let removed = apply_prune(&mut kb, now, &evolution);
    persist_kb_atomic(kb_path, &kb)?;
    let report_dir = kb_path.parent().unwrap_or_else(|| Path::new("."));
    let report_path = service::write_prune_report(report_dir, now, &removed)?;

    match format {
        Format::Jsonl => {
            for entry in &removed {
                emit_line(entry)?;
            }
        }
        Format::Table => {
            for entry in &removed {
                println!("removed {}  utility {:.6}", entry.id.as_str(), entry.utility);
            }
            println!(
                "pruned {} of {} entries; report at {}",
                removed.len(),
                removed.len() + kb.len(),
                report_path.display()
            );
        }
    }
    Ok(())
}

fn stats_command(kb_path: &Path, format: Format) -> anyhow::Result<()> {
    let kb = expkb_cli::load_kb_strict(kb_path)?;
    let snapshot = kb.snapshot();
    let entries = snapshot.len();
    let steps: usize = snapshot.iter().map(|e| e.steps.len()).sum();
    let mean_quality = if entries == 0 {
        0.0
    } else {
        snapshot.iter().map(|e| e.quality.quality).sum::<f64>() / entries as f64
    };
    match format {
        Format::Jsonl => emit_line(&serde_json::json!({
            "entries": entries,
            "steps": steps,
            "mean_quality": mean_quality,
            "version": snapshot.version(),
        }))?,
        Format::Table => {
            println!("entries       {entries}");
            println!("steps         {steps}");
            println!("mean quality  {mean_quality:.4}");
            println!("version       {}", snapshot.version());
        }
    }
    Ok(())
}

fn serve_command(
    mut config: ServiceConfig,
    kb_override: Option<PathBuf>,
    bind: Option<String>,
) -> anyhow::Result<()> {
    if let Some(bind) = bind {
        config.bind = bind;
    }
    if let Some(kb) = kb_override {
        // The service derives the kb file from the data directory.
        match kb.parent() {
            Some(parent) if !parent.as_os_str().is_empty() => {
                config.data_dir = parent.to_path_buf();
            }
            _ => config.data_dir = PathBuf::from("."),
        }
        anyhow::ensure!(
            kb.file_name().is_some_and(|n| n == "kb.jsonl"),
            "the service stores its base as kb.jsonl inside the data directory; \
             point --kb at a file named kb.jsonl"
        );
    }

    let filter = tracing_subscriber::EnvFilter::try_new(&config.log_verbosity)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).init();

    // Adapters own blocking HTTP clients; build them before the runtime.
    let state = service::build_state(config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(service::run(state))
}
