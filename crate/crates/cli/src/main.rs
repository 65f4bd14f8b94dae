use std::fs::File;
use std::io::{BufReader, IsTerminal};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kgdx::backend::{self, Backends};
use kgdx::config::Config;
use kgdx::service::{self, AppState};
use kgdx_core::builder::{build_kg, ddxplus, load_corpus, write_corpus, CanonicalDiseaseMap, HierarchyAssignment};
use kgdx_core::engine::{DiagnoseOptions, Engine, LegMode};
use kgdx_core::eval::{full_grid, load_aliases, load_cases, run_ablation, run_masking_experiment, run_plain, EvalReport};
use kgdx_core::matcher::{extract_differences, match_features, vote_subcategory, FeatureIndex, PatientQuery};
use kgdx_core::retriever::{ingest, load_index, save_index};
use kgdx_core::template::PromptTemplates;
use kgdx_core::DiagnosticKg;
use tracing::Level;

#[derive(Parser)]
#[command(name = "kgdx", version, about = "Knowledge-graph guided retrieval and differential diagnosis")]
struct Cli {
    /// TOML config file; defaults to ./kgdx.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the four-level graph from an EHR corpus.
    BuildKg(BuildKgArgs),
    /// Embed a corpus into a retrieval index.
    Ingest(IngestArgs),
    /// Rank indexed records against a query.
    Retrieve(RetrieveArgs),
    /// Show feature matches, the subcategory vote and its differences.
    Match(MatchArgs),
    /// Diagnose one patient description.
    Diagnose(DiagnoseArgs),
    /// Score a case file, optionally with the ablation grid and masking.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Convert DDXPlus patient rows to a corpus file.
    ConvertDdxplus(ConvertArgs),
}

#[derive(Args)]
struct BuildKgArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Ask the chat backend for distinguishing manifestations per disease.
    #[arg(long)]
    augment: bool,
    /// Use this disease/subcategory/category assignment instead of asking the backend.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    hierarchy_out: Option<PathBuf>,
    /// Where to write the raw → canonical disease name map.
    #[arg(long)]
    canonical_out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Canonical name map written by build-kg.
    #[arg(long)]
    canonical: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    text: String,
    #[arg(short, long)]
    k: Option<usize>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    text: String,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    text: String,
    /// Leave the differences block out of the prompt.
    #[arg(long)]
    no_kg: bool,
    /// Leave retrieved records out of the prompt.
    #[arg(long)]
    no_retrieval: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Also print the prompt that was sent.
    #[arg(long)]
    show_prompt: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    cases: Option<PathBuf>,
    /// JSON map of gold label → accepted disease labels.
    #[arg(long)]
    aliases: Option<PathBuf>,
    /// Run the 3×3 retrieval/graph ablation grid.
    #[arg(long)]
    ablation: bool,
    /// Run the masking experiment; without a list, the configured ratios.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    mask_ratios: Option<Vec<f64>>,
    /// Skip re-adding deleted features that follow-up questions ask about.
    #[arg(long)]
    no_restore: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report path; the text tables go next to it with a .txt extension.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Patient CSV of a DDXPlus release.
    #[arg(long)]
    patients: PathBuf,
    /// release_evidences.json
    #[arg(long)]
    evidences: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep at most this many rows per pathology.
    #[arg(long)]
    per_pathology: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .with_context(|| format!("no {what} path given on the command line or in the config"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn templates(cfg: &Config) -> Result<PromptTemplates> {
    Ok(PromptTemplates::load_dir(cfg.paths.templates.as_deref())?)
}

fn backends(cfg: &Config) -> Result<Backends> {
    backend::from_config(cfg).context("configuring backends")
}

fn load_engine(cfg: &Config, args: &EngineArgs) -> Result<Engine> {
    let kg_path = pick(args.kg.clone(), &cfg.paths.kg, "kg")?;
    let index_path = pick(args.index.clone(), &cfg.paths.index, "index")?;
    let kg = DiagnosticKg::load(&kg_path).with_context(|| format!("loading {}", kg_path.display()))?;
    let index = load_index(&index_path).with_context(|| format!("loading {}", index_path.display()))?;
    let Backends { chat, embedder } = backends(cfg)?;
    let probe = embedder.embed_one("dimension probe")?;
    if probe.dimension() != index.dimension() {
        bail!(
            "embedder produces {}-dimensional vectors but the index holds {}",
            probe.dimension(),
            index.dimension()
        );
    }
    Ok(Engine::new(Arc::new(kg), Arc::new(index), chat, embedder, templates(cfg)?, cfg.engine())?)
}

fn build_kg_cmd(cfg: &Config, a: BuildKgArgs) -> Result<()> {
    let corpus_path = pick(a.corpus, &cfg.paths.corpus, "corpus")?;
    let corpus = load_corpus(&corpus_path)?;
    let hierarchy: Option<HierarchyAssignment> = a.hierarchy.as_deref().map(read_json).transpose()?;
    let Backends { chat, embedder } = backends(cfg)?;
    let out = build_kg(
        &corpus,
        chat.as_ref(),
        embedder.as_ref(),
        &templates(cfg)?,
        &cfg.build(a.augment || cfg.builder.augment),
        hierarchy,
    )?;
    out.kg.save(&a.out)?;
    if let Some(p) = &a.hierarchy_out {
        write_json(p, &out.hierarchy)?;
    }
    if let Some(p) = &a.canonical_out {
        write_json(p, &out.canonical)?;
    }
    if let Some(r) = &out.augment {
        for (d, why) in &r.skipped {
            tracing::warn!(disease = %d, reason = %why, "augmentation skipped");
        }
    }
    println!(
        "wrote {} ({} nodes, {} edges, {} canonical diseases)",
        a.out.display(),
        out.kg.node_count(),
        out.kg.edge_count(),
        out.canonical.len()
    );
    Ok(())
}

fn ingest_cmd(cfg: &Config, a: IngestArgs) -> Result<()> {
    let corpus = load_corpus(pick(a.corpus, &cfg.paths.corpus, "corpus")?)?;
    let canonical: Option<CanonicalDiseaseMap> = a.canonical.as_deref().map(read_json).transpose()?;
    let Backends { embedder, .. } = backends(cfg)?;
    let index = ingest(&corpus, embedder.as_ref(), canonical.as_ref())?;
    save_index(&index, &a.out)?;
    println!("wrote {} ({} records, dimension {})", a.out.display(), index.len(), index.dimension());
    Ok(())
}

fn retrieve_cmd(cfg: &Config, a: RetrieveArgs) -> Result<()> {
    let index = load_index(pick(a.index, &cfg.paths.index, "index")?)?;
    let Backends { embedder, .. } = backends(cfg)?;
    let query = PatientQuery::from_text(&a.text, embedder.as_ref())?;
    let q = query.query_vector().context("query has no features")?;
    let ctx = index.retrieve(&q, a.k.unwrap_or(cfg.retriever.k))?;
    for (rank, h) in ctx.hits.iter().enumerate() {
        let first = h.document_text.lines().next().unwrap_or("");
        println!("{:>2}. {:.4}  {}  {}", rank + 1, h.score, h.record_id, first);
    }
    Ok(())
}

fn match_cmd(cfg: &Config, a: MatchArgs) -> Result<()> {
    let kg = DiagnosticKg::load(pick(a.kg, &cfg.paths.kg, "kg")?)?;
    let Backends { embedder, .. } = backends(cfg)?;
    let index = FeatureIndex::build(&kg, embedder.as_ref())?;
    let query = PatientQuery::from_text(&a.text, embedder.as_ref())?;
    let outcome = match_features(&query, &index, &cfg.engine().matcher);
    println!("features:");
    for (i, f) in query.features.iter().enumerate() {
        println!("  [{i}] {f}");
        for m in outcome.matches.iter().filter(|m| m.feature_index == i) {
            println!("      {:.4}  {}", m.similarity, m.node_id);
        }
    }
    if outcome.matched.is_empty() {
        println!("no graph features matched");
        return Ok(());
    }
    let vote = vote_subcategory(&outcome.matched, &kg)?;
    println!("tally:");
    for (id, r) in &vote.tally {
        println!("  {id}  {r}");
    }
    println!("winner: {}", vote.winner);
    let diffs = extract_differences(&kg, vote.winner.as_str())?;
    println!("differences:");
    if diffs.is_empty() {
        println!("  (none)");
    }
    for t in &diffs.triples {
        println!("  ({}, {}, {})", t.disease, t.relation, t.feature);
    }
    Ok(())
}

fn diagnose_cmd(cfg: &Config, a: DiagnoseArgs) -> Result<()> {
    let engine = load_engine(cfg, &a.engine)?;
    let opts = DiagnoseOptions {
        kg: if a.no_kg { LegMode::Without } else { LegMode::With },
        retrieval: if a.no_retrieval { LegMode::Without } else { LegMode::With },
        seed: cfg.eval.seed,
        ..Default::default()
    };
    let d = engine.diagnose(&a.text, &opts)?;
    if a.show_prompt {
        println!("{}\n\n{}\n", d.trace.system_text, d.trace.user_text);
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&d.report)?);
        return Ok(());
    }
    let r = &d.report;
    let show = |x: &Option<String>| x.clone().unwrap_or_else(|| "-".into());
    println!("category:     {}", show(&r.diagnosis_l1));
    println!("subcategory:  {}", show(&r.diagnosis_l2));
    println!("disease:      {}", show(&r.diagnosis_l3));
    println!("confidence:   {:?}{}", r.confidence_flag, if r.off_graph { " (off graph)" } else { "" });
    if !r.reasoning_text.is_empty() {
        println!("reasoning:    {}", r.reasoning_text);
    }
    println!("treatments:   {}", r.treatments.join("; "));
    println!("medications:  {}", r.medications.join("; "));
    for q in &r.follow_up_questions {
        println!("ask:          {}", q.text);
    }
    Ok(())
}

fn eval_cmd(cfg: &Config, a: EvalArgs) -> Result<()> {
    let engine = load_engine(cfg, &a.engine)?;
    let cases = load_cases(pick(a.cases, &cfg.paths.cases, "cases")?)?;
    let aliases = match a.aliases.or_else(|| cfg.paths.aliases.clone()) {
        Some(p) => load_aliases(p)?,
        None => Default::default(),
    };
    let seed = a.seed.unwrap_or(cfg.eval.seed);
    let (plain, _) = run_plain(&engine, &cases, &aliases, seed)?;
    let ablation = a
        .ablation
        .then(|| run_ablation(&engine, &cases, &aliases, &full_grid(), seed))
        .transpose()?;
    let masking = match a.mask_ratios {
        Some(r) => {
            let ratios = if r.is_empty() { cfg.eval.mask_ratios.clone() } else { r };
            let restore = cfg.eval.restore && !a.no_restore;
            Some(run_masking_experiment(&engine, &cases, &aliases, &ratios, restore, seed)?)
        }
        None => None,
    };
    let report = EvalReport {
        plain: Some(plain),
        ablation,
        masking,
    };
    std::fs::write(&a.report, report.to_json()).with_context(|| format!("writing {}", a.report.display()))?;
    let text = report.render_text();
    std::fs::write(a.report.with_extension("txt"), &text)?;
    print!("{text}");
    let t = engine.telemetry();
    tracing::info!(chat_calls = t.chat_calls, parse_retries = t.parse_retries, low_info = t.low_info, "eval finished");
    Ok(())
}

fn serve_cmd(cfg: &Config, a: ServeArgs) -> Result<()> {
    let engine = Arc::new(load_engine(cfg, &a.engine)?);
    let listen = a.listen.unwrap_or_else(|| cfg.server.listen.clone());
    let state = AppState::new(engine);
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(service::serve(state, &listen, cfg.server.snapshot_path.clone()))
}

fn convert_cmd(a: ConvertArgs) -> Result<()> {
    let evidences = ddxplus::load_evidences(&a.evidences)?;
    let file = File::open(&a.patients).with_context(|| format!("opening {}", a.patients.display()))?;
    let records = ddxplus::convert(BufReader::new(file), &evidences, a.per_pathology, a.seed)?;
    write_corpus(&a.out, &records)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_max_level(cli.log_level)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match cli.config {
        Some(p) => Config::load(&p)?,
        None if Path::new("kgdx.toml").exists() => Config::load(Path::new("kgdx.toml"))?,
        None => Config::default(),
    };
    match cli.command {
        Command::BuildKg(a) => build_kg_cmd(&cfg, a),
        Command::Ingest(a) => ingest_cmd(&cfg, a),
        Command::Retrieve(a) => retrieve_cmd(&cfg, a),
        Command::Match(a) => match_cmd(&cfg, a),
        Command::Diagnose(a) => diagnose_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::Serve(a) => serve_cmd(&cfg, a),
        Command::ConvertDdxplus(a) => convert_cmd(a),
    }
}
