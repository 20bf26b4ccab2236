//! Command-line surface. Every LLM-backed command writes a self-contained
//! run directory that `replay` can re-execute from the response cache.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{BackendKind, EmbedderKind, RunConfig};
use crate::corpus::{
    self, dedup_by_text, load_dataset, load_dataset_with_schema, stratified_subsample, AnnotatedDoc, CorpusError,
    DatasetBundle, DatasetFormat, EntitySet, LabelSchema,
};
use crate::difficulty::{self, compute_raw_dimensions, normalize_and_aggregate, DifficultyError, DifficultyProfile, Dimensions};
use crate::executor::{Executor, ExecutorError};
use crate::fir::{self, FirAgents, FirError, SelectionMode};
use crate::instruction::{
    self, generate_guideline, generate_strategies, render_instruction_set, select_strategy, InstructionError,
    InstructionSet, StrategySelection, TaskInstruction, Variant,
};
use crate::llm::{
    AgentSet, Backend, BackendError, FnBackend, Gateway, GatewayError, GatewayStats, MockScript, OpenAiBackend,
    ResponseCache, RetryPolicy, ScriptedBackend, SimulatedAgents,
};
use crate::metrics::{
    self, gain_correlation, overlap_split_score, BaselineMap, EvalReport, F1Pair, GainCorrelation, MetricsError,
    OverlapSplitReport,
};
use crate::prompts;
use crate::retrieval::{
    build_pool, cosine, retrieve_entity_density, retrieve_semantic_knn_by_vector, retrieve_type_overlap,
    CachedEmbedder, DemoSet, Embedder, EmbeddingError, FnEmbedder, HashingEmbedder, HttpEmbedder, OracleAck,
    Paradigm, PromptTemplate, RetrievalError, TemplateError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Budget(_) => EXIT_BUDGET,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Failed(_) => EXIT_FAILED,
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::BudgetExceeded { .. } => CliError::Budget(e.to_string()),
            GatewayError::Cache(_) => CliError::Failed(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<ExecutorError> for CliError {
    fn from(e: ExecutorError) -> Self {
        match e {
            ExecutorError::Gateway(g) => g.into(),
            ExecutorError::Template(t) => CliError::Config(t.to_string()),
        }
    }
}

impl From<InstructionError> for CliError {
    fn from(e: InstructionError) -> Self {
        match e {
            InstructionError::Gateway(g) => g.into(),
            InstructionError::Executor(x) => x.into(),
            InstructionError::GenerationShortfall { .. } | InstructionError::MalformedGuidelineResponse { .. } => {
                CliError::Backend(e.to_string())
            }
            InstructionError::Metrics(_) => CliError::Failed(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<FirError> for CliError {
    fn from(e: FirError) -> Self {
        match e {
            FirError::Gateway(g) => g.into(),
            FirError::Executor(x) => x.into(),
            FirError::Instruction(i) => i.into(),
            FirError::Config(_) | FirError::Corpus(_) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DifficultyError> for CliError {
    fn from(e: DifficultyError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TemplateError> for CliError {
    fn from(e: TemplateError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::EmbeddingService { .. } | RetrievalError::QueryEmbedding(_) => {
                CliError::Backend(e.to_string())
            }
            _ => CliError::Failed(e.to_string()),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "ttprompt", version, about = "Instruction-refined LLM entity extraction for threat intelligence text")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// simulated, script or remote.
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    /// Mock script for `--backend script`.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    /// Maximum number of LLM backend calls.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Serve every LLM and embedding request from the cache; a miss is a backend failure.
    #[arg(long, global = true)]
    pub cache_only: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Conll,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a raw dataset and write a canonical bundle directory.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: FormatArg,
        /// Schema file when the input directory has no schema.json.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        /// Drop documents whose text repeats within a split.
        #[arg(long)]
        dedup: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Difficulty profile and Ω across bundles.
    Profile {
        #[arg(long, num_args = 1..)]
        bundles: Vec<PathBuf>,
        /// JSON rows `[{"dataset": .., "values": [6 numbers]}]` to include as raw dimensions.
        #[arg(long)]
        rows: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare retrieval paradigms for in-context extraction.
    ReticlStudy {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Allow the type-overlap paradigm, which reads the query's gold types.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate and select a guiding strategy, and draft the initial guideline.
    Strategize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        subset_frac: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine the guideline on a small training subset.
    Refine {
        #[arg(long)]
        bundle: PathBuf,
        /// Directory written by `strategize`.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        mode: Option<SelectionMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions, or run an instruction variant over a test split.
    Evaluate {
        #[arg(long, requires_all = ["gold", "schema"], conflicts_with_all = ["bundle", "run"])]
        pred: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Demo sets per doc (as written by reticl-study) for the overlap split.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long, requires = "run")]
        bundle: Option<PathBuf>,
        /// Directory written by `strategize` or `refine`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// base, plus_strategy, plus_guideline, full, or all.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate F1 gains over fine-tuned baselines with difficulty.
    Correlate {
        /// `{dataset: {method: {"macro": x, "micro": y}}}`.
        #[arg(long)]
        results: PathBuf,
        /// `{dataset: omega}` or the output of `profile`.
        #[arg(long)]
        omega: PathBuf,
        #[arg(long, default_value = "TTPrompt")]
        method: String,
        /// `{"default": .., "overrides": {dataset: baseline}}`.
        #[arg(long)]
        baselines: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a recorded command from the response cache and compare artifacts.
    Replay {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Profile { .. } => "profile",
            Command::ReticlStudy { .. } => "reticl-study",
            Command::Strategize { .. } => "strategize",
            Command::Refine { .. } => "refine",
            Command::Evaluate { .. } => "evaluate",
            Command::Correlate { .. } => "correlate",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Everything a report number depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub prompt_version: String,
    pub template_version: String,
    pub config_hash: String,
    pub backend: String,
    pub executor_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guideline_version: Option<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompt_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirSummary {
    pub selected_epoch: Option<usize>,
    pub final_version: u32,
    pub applied: usize,
    pub skipped: usize,
    pub validation: Vec<fir::EpochScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub command: String,
    pub dataset: Option<String>,
    pub reports: BTreeMap<String, EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<OverlapSplitReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Vec<DifficultyProfile>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<GainCorrelation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<StrategySelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fir: Option<FirSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ExperimentReport {
    fn new(command: &str, dataset: Option<&str>) -> Self {
        ExperimentReport {
            command: command.to_string(),
            dataset: dataset.map(str::to_string),
            reports: BTreeMap::new(),
            overlap: None,
            difficulty: None,
            correlation: None,
            strategies: None,
            fir: None,
            provenance: None,
            notes: Vec::new(),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{}{}\n", self.command, self.dataset.as_ref().map(|d| format!(" on {d}")).unwrap_or_default());
        for (label, r) in &self.reports {
            s.push_str(&format!(
                "  {label:<24} micro {:6.2}  macro {:6.2}  ({} docs)\n",
                100.0 * r.micro_f1,
                100.0 * r.macro_f1,
                r.n_docs
            ));
        }
        if let Some(o) = &self.overlap {
            s.push_str(&format!(
                "  type overlap     micro {:6.2} ({} docs) | no overlap micro {:6.2} ({} docs)\n",
                100.0 * o.report_overlap.micro_f1,
                o.n_overlap,
                100.0 * o.report_no_overlap.micro_f1,
                o.n_no_overlap
            ));
        }
        for n in &self.notes {
            s.push_str(&format!("  note: {n}\n"));
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
struct Invocation {
    command: String,
    args: Vec<String>,
    cwd: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    entities: EntitySet,
}

/// Files a replay does not compare: they describe the process, not the result.
const VOLATILE: &[&str] = &["invocation.json", "run_stats.json", "replay"];

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    instruction::write_json(path, value).map_err(|e| CliError::Failed(e.to_string()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_predictions(path: &Path, docs: &[AnnotatedDoc], preds: &BTreeMap<String, EntitySet>) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        let rec = PredictionRecord {
            id: d.id.clone(),
            entities: preds.get(&d.id).cloned().unwrap_or_default(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn read_predictions(path: &Path) -> Result<BTreeMap<String, EntitySet>> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PredictionRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert(rec.id, rec.entities);
    }
    Ok(out)
}

fn sha(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Resolved configuration plus the command-line overrides.
fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Config)?,
        None => RunConfig::with_seed(common.seed.unwrap_or(0)),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.fir.seed = s;
    }
    if let Some(b) = common.backend {
        cfg.backend.kind = b;
    }
    if let Some(s) = &common.script {
        cfg.backend.script = Some(s.clone());
        if common.backend.is_none() {
            cfg.backend.kind = BackendKind::Script;
        }
    }
    if common.budget.is_some() {
        cfg.budget = common.budget;
    }
    if let Some(c) = &common.cache_dir {
        cfg.cache_dir = c.clone();
    }
    if let Some(p) = common.parallelism {
        cfg.parallelism = p;
    }
    cfg.apply_env();
    Ok(cfg)
}

fn absolutize(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|c| c.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn out_dir(explicit: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match explicit.clone().or_else(|| cfg.output_dir.clone()) {
        Some(d) => d,
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
            let mut d = PathBuf::from("runs").join(&stamp);
            let mut n = 2;
            while d.exists() {
                d = PathBuf::from("runs").join(format!("{stamp}-{n}"));
                n += 1;
            }
            d
        }
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

struct Runtime {
    cfg: RunConfig,
    gateway: Arc<Gateway>,
    agents: AgentSet,
}

impl Runtime {
    fn new(cfg: RunConfig, bundle: Option<&DatasetBundle>, cache_only: bool) -> Result<Self> {
        let backend: Arc<dyn Backend> = if cache_only {
            Arc::new(FnBackend::new("cache-only", |r: &crate::llm::ChatRequest| {
                Err(BackendError::Fatal(format!("cache miss for request {:?} in cache-only mode", r.request_tag)))
            }))
        } else {
            match cfg.backend.kind {
                BackendKind::Simulated => {
                    let bundle = bundle.ok_or_else(|| CliError::Config("the simulated backend needs a bundle".into()))?;
                    Arc::new(SimulatedAgents::from_docs(
                        bundle.schema.clone(),
                        &bundle.train,
                        cfg.backend.simulated_recall,
                        cfg.backend.simulated_confusion,
                    ))
                }
                BackendKind::Script => {
                    let path = cfg.backend.script.as_ref().expect("validated");
                    Arc::new(ScriptedBackend::new(MockScript::load(path).map_err(CliError::Config)?))
                }
                BackendKind::Remote => Arc::new(OpenAiBackend::new(
                    cfg.backend.api_base.as_deref().expect("validated"),
                    std::env::var("LLM_API_KEY").ok(),
                )),
            }
        };
        let gateway = Arc::new(
            Gateway::new(backend)
                .with_cache(ResponseCache::on_disk(&cfg.llm_cache_root()))
                .with_budget(cfg.budget)
                .with_parallelism(cfg.parallelism)
                .with_retry(RetryPolicy {
                    max_retries: cfg.backend.max_retries,
                    base_delay_ms: cfg.backend.retry_base_ms,
                    ..RetryPolicy::default()
                }),
        );
        let agents = AgentSet::new(gateway.clone(), &cfg.models);
        Ok(Runtime { cfg, gateway, agents })
    }

    fn executor(&self, schema: &LabelSchema) -> Result<Executor> {
        let mut ex = Executor::new(self.agents.executor.clone(), schema.clone());
        if let Some(t) = &self.cfg.template {
            ex.template = PromptTemplate::load(t)?;
        }
        Ok(ex)
    }

    fn provenance(&self, template: &PromptTemplate) -> Provenance {
        Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            prompt_version: prompts::PROMPT_VERSION.to_string(),
            template_version: template.version.clone(),
            config_hash: self.cfg.hash(),
            backend: self.cfg.backend.kind.as_str().to_string(),
            executor_model: self.cfg.models.executor.clone(),
            guideline_version: None,
            prompt_hashes: BTreeMap::new(),
        }
    }

    fn stats(&self) -> GatewayStats {
        self.gateway.stats()
    }
}

fn embedder(cfg: &RunConfig, cache_only: bool) -> Box<dyn Embedder> {
    match cfg.embedder.kind {
        EmbedderKind::Hashing => Box::new(HashingEmbedder::new(cfg.embedder.dim)),
        EmbedderKind::Remote => {
            let root = cfg.cache_dir.clone();
            if cache_only {
                let model = cfg.models.embedder.clone();
                let inner = FnEmbedder::new(model, |_t: &str| {
                    Err(EmbeddingError::Service("embedding cache miss in cache-only mode".into()))
                });
                Box::new(CachedEmbedder::new(inner, &root))
            } else {
                let base = cfg.backend.api_base.clone().expect("validated");
                let inner = HttpEmbedder::new(
                    format!("{}/embeddings", base.trim_end_matches('/')),
                    cfg.models.embedder.clone(),
                    std::env::var("LLM_API_KEY").ok(),
                );
                Box::new(CachedEmbedder::new(inner, &root))
            }
        }
    }
}

fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    Ok(load_dataset(dir, DatasetFormat::Jsonl)?)
}

/// Parses and runs one invocation; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match run(&cli, args.get(1..).unwrap_or_default()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("ttprompt {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

fn record_invocation(dir: &Path, cmd: &str, args: &[String], cfg: &RunConfig) -> Result<()> {
    write_json(
        &dir.join("invocation.json"),
        &Invocation {
            command: cmd.to_string(),
            args: args.to_vec(),
            cwd: std::env::current_dir().unwrap_or_default(),
        },
    )?;
    write_json(&dir.join("run_config.json"), cfg)
}

/// Runs a parsed command; `args` (without the program name) are recorded for replay.
pub fn run(cli: &Cli, args: &[String]) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Ingest {
            input,
            format,
            schema,
            name,
            dedup,
            out,
        } => cmd_ingest(input, *format, schema.as_deref(), name.as_deref(), *dedup, out),
        Command::Profile { bundles, rows, out } => {
            let cfg = resolve_config(common)?;
            cfg.validate().map_err(CliError::Config)?;
            cmd_profile(&cfg, bundles, rows.as_deref(), out.as_deref(), common.cache_only)
        }
        Command::Correlate {
            results,
            omega,
            method,
            baselines,
            out,
        } => cmd_correlate(results, omega, method, baselines.as_deref(), out.as_deref()),
        Command::Replay { run_dir, out } => cmd_replay(run_dir, out.as_deref()),
        Command::Evaluate {
            pred: Some(pred),
            gold,
            schema,
            demos,
            out,
            ..
        } => cmd_score(
            pred,
            gold.as_deref().expect("clap requires gold"),
            schema.as_deref().expect("clap requires schema"),
            demos.as_deref(),
            out.as_deref(),
            resolve_config(common)?.macro_averaging,
        ),
        command => {
            let mut cfg = resolve_config(common)?;
            match command {
                Command::ReticlStudy { k: Some(k), .. } => cfg.retrieval.k = *k,
                Command::Strategize { subset_frac, n, .. } => {
                    if let Some(f) = subset_frac {
                        cfg.strategies.subset_fraction = *f;
                    }
                    if let Some(n) = n {
                        cfg.strategies.n = *n;
                    }
                }
                Command::Refine { epochs, fraction, mode, .. } => {
                    if let Some(e) = epochs {
                        cfg.fir.epochs = *e;
                    }
                    if let Some(f) = fraction {
                        cfg.fir.subset_fraction = *f;
                    }
                    if let Some(m) = mode {
                        cfg.fir.mode = *m;
                    }
                }
                _ => {}
            }
            cfg.validate().map_err(CliError::Config)?;
            let bundle_path = match command {
                Command::ReticlStudy { bundle, .. } | Command::Strategize { bundle, .. } | Command::Refine { bundle, .. } => {
                    bundle.clone()
                }
                Command::Evaluate { bundle: Some(b), .. } => b.clone(),
                Command::Evaluate { .. } => {
                    return Err(CliError::Config("evaluate needs --pred/--gold/--schema or --bundle/--run".into()))
                }
                _ => unreachable!("handled above"),
            };
            let bundle = load_bundle(&bundle_path)?;
            let out = match command {
                Command::ReticlStudy { out, .. }
                | Command::Strategize { out, .. }
                | Command::Refine { out, .. }
                | Command::Evaluate { out, .. } => out_dir(out, &cfg)?,
                _ => unreachable!(),
            };
            record_invocation(&out, command.name(), args, &cfg)?;
            let rt = Runtime::new(cfg, Some(&bundle), common.cache_only)?;
            let result = match command {
                Command::ReticlStudy { oracle, .. } => cmd_reticl_study(&rt, &bundle, *oracle, &out, common.cache_only),
                Command::Strategize { .. } => cmd_strategize(&rt, &bundle, &out),
                Command::Refine { from, .. } => cmd_refine(&rt, &bundle, from, &out),
                Command::Evaluate { run, variant, .. } => cmd_evaluate(
                    &rt,
                    &bundle,
                    run.as_deref().expect("clap requires run"),
                    variant.as_deref(),
                    &out,
                ),
                _ => unreachable!(),
            };
            write_json(&out.join("run_stats.json"), &rt.stats())?;
            if result.is_ok() {
                println!("run directory: {}", out.display());
            }
            result
        }
    }
}

fn cmd_ingest(
    input: &Path,
    format: FormatArg,
    schema: Option<&Path>,
    name: Option<&str>,
    dedup: bool,
    out: &Path,
) -> Result<()> {
    let format = match format {
        FormatArg::Jsonl => DatasetFormat::Jsonl,
        FormatArg::Conll => DatasetFormat::Conll,
    };
    let mut bundle = match schema {
        Some(s) => load_dataset_with_schema(input, format, LabelSchema::load(s)?)?,
        None => load_dataset(input, format)?,
    };
    if let Some(n) = name {
        bundle.name = n.to_string();
    }
    if dedup {
        let mut removed = 0;
        let mut run = |docs: Vec<AnnotatedDoc>| {
            let (kept, gone) = dedup_by_text(docs);
            removed += gone.len();
            kept
        };
        bundle.train = run(std::mem::take(&mut bundle.train));
        bundle.test = run(std::mem::take(&mut bundle.test));
        bundle.dev = bundle.dev.take().map(&mut run);
        if removed > 0 {
            println!("removed {removed} duplicate document(s)");
        }
        bundle.validate()?;
    }
    bundle.save(out)?;
    let (train, dev, test) = bundle.split_sizes();
    println!(
        "{}: {} types, train {train}, dev {}, test {test} -> {}",
        bundle.name,
        bundle.schema.len(),
        dev.map(|d| d.to_string()).unwrap_or_else(|| "-".into()),
        out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct RawRow {
    dataset: String,
    values: [f64; 6],
}

fn cmd_profile(cfg: &RunConfig, bundles: &[PathBuf], rows: Option<&Path>, out: Option<&Path>, cache_only: bool) -> Result<()> {
    let emb = embedder(cfg, cache_only);
    let mut profiles = Vec::new();
    for dir in bundles {
        let b = load_bundle(dir)?;
        profiles.push(compute_raw_dimensions(&b, emb.as_ref())?);
    }
    if let Some(r) = rows {
        let raw: Vec<RawRow> = read_json(r)?;
        profiles.extend(
            raw.into_iter()
                .map(|row| DifficultyProfile::from_raw(row.dataset, Dimensions::from_array(row.values))),
        );
    }
    if profiles.is_empty() {
        return Err(CliError::Config("profile needs --bundles or --rows".into()));
    }
    let profiles = if profiles.len() >= 2 {
        normalize_and_aggregate(&profiles, difficulty::EQUAL_WEIGHTS)?
    } else {
        profiles
    };
    let table = difficulty::render_table(&profiles);
    print!("{table}");
    if let Some(o) = out {
        write_json(o, &serde_json::json!({ "profiles": profiles, "table": table }))?;
    }
    Ok(())
}

fn scatter_check(
    pool: &crate::retrieval::EmbeddedPool,
    query: &[f32],
    k: usize,
    got: &DemoSet,
) -> bool {
    let mut all: Vec<(f64, usize)> = pool
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (cosine(query, &e.vector), i))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let want: Vec<usize> = all.iter().take(k).map(|(_, i)| *i).collect();
    let have: Vec<usize> = got.demos.iter().rev().map(|d| d.pool_index).collect();
    want == have
}

fn cmd_reticl_study(rt: &Runtime, bundle: &DatasetBundle, oracle: bool, out: &Path, cache_only: bool) -> Result<()> {
    let cfg = &rt.cfg;
    let k = cfg.retrieval.k;
    let emb = embedder(cfg, cache_only);
    let pool = build_pool(&bundle.train, emb.as_ref(), cfg.parallelism)?;
    let texts: Vec<&str> = bundle.test.iter().map(|d| d.text.as_str()).collect();
    let mut qvecs = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(32) {
        qvecs.extend(
            emb.embed(chunk)
                .map_err(|e| CliError::Backend(format!("query embedding: {e}")))?,
        );
    }

    let executor = rt.executor(&bundle.schema)?;
    let tactic = TaskInstruction::for_schema(&bundle.schema);
    let mut report = ExperimentReport::new("reticl-study", Some(&bundle.name));
    let mut prov = rt.provenance(&executor.template);
    prov.prompt_hashes.insert("base".into(), sha(&tactic.text));

    let mut paradigms = vec![Paradigm::SemanticKnn, Paradigm::EntityDensity];
    if oracle {
        paradigms.insert(1, Paradigm::TypeOverlap);
    } else {
        report
            .notes
            .push("type_overlap skipped: it reads query gold labels and needs --oracle".into());
    }
    for paradigm in paradigms {
        let mut demos: BTreeMap<String, DemoSet> = BTreeMap::new();
        for (doc, qv) in bundle.test.iter().zip(&qvecs) {
            let set = match paradigm {
                Paradigm::SemanticKnn => {
                    let set = retrieve_semantic_knn_by_vector(&pool, qv, k, Some(&doc.id))?;
                    if !scatter_check(&pool, qv, k.min(pool.len()), &set) {
                        return Err(CliError::Failed(format!(
                            "semantic retrieval for {} disagrees with the exhaustive scan",
                            doc.id
                        )));
                    }
                    set
                }
                Paradigm::TypeOverlap => retrieve_type_overlap(
                    &pool,
                    &doc.gold,
                    k,
                    Some(&doc.id),
                    OracleAck::acknowledge_gold_label_use(),
                )?,
                Paradigm::EntityDensity => retrieve_entity_density(&pool, k, Some(&doc.id))?,
            };
            demos.insert(doc.id.clone(), set);
        }
        let ordered: Vec<&DemoSet> = bundle.test.iter().map(|d| &demos[&d.id]).collect();
        let preds = executor.predict_with_demos(&tactic.text, &bundle.test, &ordered)?;
        let r = metrics::score(&preds, &bundle.test, &bundle.schema, cfg.macro_averaging)?;
        if paradigm == Paradigm::SemanticKnn {
            report.overlap = Some(overlap_split_score(
                &preds,
                &bundle.test,
                &demos,
                &bundle.schema,
                cfg.macro_averaging,
            )?);
        }
        write_predictions(&out.join("predictions").join(format!("{}.jsonl", paradigm.as_str())), &bundle.test, &preds)?;
        write_json(&out.join("demos").join(format!("{}.json", paradigm.as_str())), &demos)?;
        report.reports.insert(paradigm.as_str().to_string(), r);
    }
    report.provenance = Some(prov);
    write_json(&out.join("report.json"), &report)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_strategize(rt: &Runtime, bundle: &DatasetBundle, out: &Path) -> Result<()> {
    let cfg = &rt.cfg;
    let d_sub = stratified_subsample(&bundle.train, cfg.strategies.subset_fraction, cfg.seed, cfg.fir.rounding)?;
    let tactic = TaskInstruction::for_schema(&bundle.schema);
    let executor = rt.executor(&bundle.schema)?;
    let strategies = generate_strategies(cfg.strategies.n, &bundle.schema, &rt.agents.strategist)?;
    let selection = select_strategy(strategies, &d_sub, &tactic, &executor)?;
    let guideline = generate_guideline(&bundle.schema, &rt.agents.guideline_writer)?;
    let set = InstructionSet::full(tactic, selection.best().clone(), guideline.clone());

    instruction::save_strategies(&out.join("strategies.json"), &selection)?;
    instruction::save_guideline(out, &guideline)?;
    write_json(&out.join("instruction_set.json"), &set)?;
    write_json(&out.join("d_sub.json"), &d_sub.iter().map(|d| d.id.as_str()).collect::<Vec<_>>())?;

    let mut report = ExperimentReport::new("strategize", Some(&bundle.name));
    let mut prov = rt.provenance(&executor.template);
    prov.guideline_version = Some(0);
    report.provenance = Some(prov);
    report.notes.push(format!(
        "selected {} (micro {:.4}) from {} strategies on {} docs",
        selection.best().id,
        selection.best().score.unwrap_or(0.0),
        selection.strategies.len(),
        d_sub.len()
    ));
    report.strategies = Some(selection);
    write_json(&out.join("report.json"), &report)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_refine(rt: &Runtime, bundle: &DatasetBundle, from: &Path, out: &Path) -> Result<()> {
    let initial: InstructionSet = read_json(&from.join("instruction_set.json"))?;
    let executor = rt.executor(&bundle.schema)?;
    let agents = FirAgents {
        executor,
        reflector: rt.agents.reflector.clone(),
        editor: rt.agents.editor.clone(),
    };
    let outcome = fir::run_fir(bundle, &initial, &rt.cfg.fir, &agents, Some(out))?;
    let refined = initial.with_guideline(outcome.final_guideline.clone());
    write_json(&out.join("instruction_set.json"), &refined)?;

    let mut report = ExperimentReport::new("refine", Some(&bundle.name));
    let mut prov = rt.provenance(&agents.executor.template);
    prov.guideline_version = Some(outcome.final_guideline.version);
    prov.prompt_hashes
        .insert("full".into(), sha(&render_instruction_set(&refined, Variant::Full)?));
    report.provenance = Some(prov);
    report.fir = Some(FirSummary {
        selected_epoch: outcome.selected_epoch,
        final_version: outcome.final_guideline.version,
        applied: outcome.state.applied(),
        skipped: outcome.state.skipped(),
        validation: outcome.state.validation.clone(),
    });
    write_json(&out.join("report.json"), &report)?;
    print!("{}", report.summary());
    for v in &outcome.state.validation {
        println!(
            "  epoch {}  guideline v{:<3} validation micro {:6.2}  macro {:6.2}",
            v.epoch,
            v.guideline_version,
            100.0 * v.micro_f1,
            100.0 * v.macro_f1
        );
    }
    println!(
        "  selected epoch {:?}, guideline v{}",
        outcome.selected_epoch, outcome.final_guideline.version
    );
    Ok(())
}

fn parse_variants(arg: Option<&str>, default: Variant) -> Result<Vec<Variant>> {
    match arg {
        None => Ok(vec![default]),
        Some("all") => Ok(Variant::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|v| v.trim().parse::<Variant>().map_err(CliError::Config))
            .collect(),
    }
}

fn cmd_evaluate(rt: &Runtime, bundle: &DatasetBundle, run: &Path, variant: Option<&str>, out: &Path) -> Result<()> {
    let variants = parse_variants(variant, rt.cfg.variant)?;
    let set: InstructionSet = read_json(&run.join("instruction_set.json"))?;
    let executor = rt.executor(&bundle.schema)?;
    let mut report = ExperimentReport::new("evaluate", Some(&bundle.name));
    let mut prov = rt.provenance(&executor.template);
    prov.guideline_version = set.procedure.as_ref().map(|g| g.version);
    for v in variants {
        let this = if v == Variant::PlusGuideline {
            set.with_guideline(
                instruction::load_guideline(run, 0).map_err(|e| CliError::Config(e.to_string()))?,
            )
        } else {
            set.clone()
        };
        let text = render_instruction_set(&this, v)?;
        prov.prompt_hashes.insert(v.as_str().into(), sha(&text));
        let preds = executor.predict_all(&text, &bundle.test)?;
        let r = metrics::score(&preds, &bundle.test, &bundle.schema, rt.cfg.macro_averaging)?;
        write_predictions(&out.join("predictions").join(format!("{}.jsonl", v.as_str())), &bundle.test, &preds)?;
        report.reports.insert(v.as_str().to_string(), r);
    }
    report.provenance = Some(prov);
    write_json(&out.join("report.json"), &report)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_score(
    pred: &Path,
    gold: &Path,
    schema: &Path,
    demos: Option<&Path>,
    out: Option<&Path>,
    averaging: metrics::MacroAveraging,
) -> Result<()> {
    let schema = LabelSchema::load(schema)?;
    let gold = corpus::read_jsonl(gold)?;
    let preds = read_predictions(pred)?;
    let mut report = ExperimentReport::new("evaluate", None);
    let r = metrics::score(&preds, &gold, &schema, averaging)?;
    print!("{}", r.to_table());
    report.reports.insert("predictions".into(), r);
    if let Some(d) = demos {
        let demos: BTreeMap<String, DemoSet> = read_json(d)?;
        report.overlap = Some(overlap_split_score(&preds, &gold, &demos, &schema, averaging)?);
    }
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| io_err(o, e))?;
        write_json(&o.join("report.json"), &report)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct ProfileFile {
    profiles: Vec<DifficultyProfile>,
}

fn read_omega(path: &Path) -> Result<Vec<(String, f64)>> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Ok(map) = serde_json::from_str::<BTreeMap<String, f64>>(&raw) {
        return Ok(map.into_iter().collect());
    }
    let pf: ProfileFile =
        serde_json::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    pf.profiles
        .into_iter()
        .map(|p| {
            p.omega
                .map(|o| (p.dataset.clone(), o))
                .ok_or_else(|| CliError::Config(format!("profile {} has no omega", p.dataset)))
        })
        .collect()
}

pub fn default_baselines() -> BaselineMap {
    BaselineMap {
        default: "LADDER*".into(),
        overrides: BTreeMap::from([("CTINexus".to_string(), "ACLM".to_string())]),
    }
}

fn cmd_correlate(results: &Path, omega: &Path, method: &str, baselines: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let results: BTreeMap<String, BTreeMap<String, F1Pair>> = read_json(results)?;
    let omega = read_omega(omega)?;
    let baselines = match baselines {
        Some(b) => read_json(b)?,
        None => default_baselines(),
    };
    let corr = gain_correlation(&results, &omega, method, &baselines)?;
    println!("dataset          omega  baseline   dMacro   dMicro");
    for r in &corr.rows {
        println!(
            "{:<16} {:5.2}  {:<9} {:+7.2}  {:+7.2}",
            r.dataset, r.omega, r.baseline, r.delta_macro, r.delta_micro
        );
    }
    println!(
        "macro: r = {:.3}, p = {:.4}\nmicro: r = {:.3}, p = {:.4}",
        corr.macro_corr.r, corr.macro_corr.p, corr.micro_corr.r, corr.micro_corr.p
    );
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| io_err(o, e))?;
        fs::write(o.join("scatter.csv"), corr.scatter_csv()).map_err(|e| io_err(o, e))?;
        let mut report = ExperimentReport::new("correlate", None);
        report.correlation = Some(corr);
        write_json(&o.join("report.json"), &report)?;
    }
    Ok(())
}

fn collect_files(root: &Path, rel: &Path, skip: &[&str], out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(root.join(rel))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if rel.as_os_str().is_empty() && skip.contains(&name.as_str()) {
            continue;
        }
        let path = rel.join(&name);
        if entry.file_type()?.is_dir() {
            collect_files(root, &path, skip, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Relative paths whose bytes differ between two run directories.
pub fn diff_run_dirs(a: &Path, b: &Path) -> std::io::Result<Vec<PathBuf>> {
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    collect_files(a, Path::new(""), VOLATILE, &mut fa)?;
    collect_files(b, Path::new(""), VOLATILE, &mut fb)?;
    fa.sort();
    fb.sort();
    let mut diffs: Vec<PathBuf> = fa
        .iter()
        .filter(|p| !fb.contains(p))
        .chain(fb.iter().filter(|p| !fa.contains(p)))
        .cloned()
        .collect();
    for p in fa.iter().filter(|p| fb.contains(p)) {
        if fs::read(a.join(p))? != fs::read(b.join(p))? {
            diffs.push(p.clone());
        }
    }
    diffs.sort();
    Ok(diffs)
}

fn strip_flag(args: &[String], flag: &str, takes_value: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if a == flag {
            i += if takes_value { 2 } else { 1 };
            continue;
        }
        if takes_value && a.starts_with(&format!("{flag}=")) {
            i += 1;
            continue;
        }
        out.push(a.clone());
        i += 1;
    }
    out
}

fn cmd_replay(run_dir: &Path, out: Option<&Path>) -> Result<()> {
    let run_dir = absolutize(run_dir);
    let inv: Invocation = read_json(&run_dir.join("invocation.json"))?;
    let target = absolutize(&out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("replay")));
    if target.exists() {
        fs::remove_dir_all(&target).map_err(|e| io_err(&target, e))?;
    }
    let mut args = inv.args.clone();
    for (flag, value) in [("--config", true), ("--out", true), ("--cache-only", false)] {
        args = strip_flag(&args, flag, value);
    }
    let mut full = vec!["ttprompt".to_string()];
    full.extend(args);
    full.extend([
        "--config".to_string(),
        run_dir.join("run_config.json").display().to_string(),
        "--out".to_string(),
        target.display().to_string(),
        "--cache-only".to_string(),
    ]);
    let cli = Cli::try_parse_from(&full).map_err(|e| CliError::Config(format!("recorded invocation: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(CliError::Config("cannot replay a replay".into()));
    }
    let prev = std::env::current_dir().map_err(|e| CliError::Failed(e.to_string()))?;
    std::env::set_current_dir(&inv.cwd).map_err(|e| io_err(&inv.cwd, e))?;
    let result = run(&cli, &full[1..]);
    std::env::set_current_dir(&prev).map_err(|e| io_err(&prev, e))?;
    result?;
    let diffs = diff_run_dirs(&run_dir, &target).map_err(|e| CliError::Failed(e.to_string()))?;
    if diffs.is_empty() {
        println!("replay of {} is byte-identical", inv.command);
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "replay diverged in {} file(s): {}",
            diffs.len(),
            diffs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::from(GatewayError::BudgetExceeded { limit: 1 }).exit_code(), EXIT_BUDGET);
        assert_eq!(CliError::from(GatewayError::Auth("x".into())).exit_code(), EXIT_BACKEND);
        assert_eq!(
            CliError::from(FirError::Gateway(GatewayError::BudgetExceeded { limit: 1 })).exit_code(),
            EXIT_BUDGET
        );
        assert_eq!(CliError::from(FirError::Config("x".into())).exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_from_args(["ttprompt", "no-such-command"]), EXIT_CONFIG);
        assert_eq!(run_from_args(["ttprompt", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_bundle_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_from_args([
            "ttprompt".to_string(),
            "strategize".into(),
            "--bundle".into(),
            dir.path().join("nope").display().to_string(),
            "--out".into(),
            dir.path().join("out").display().to_string(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn strip_flag_handles_both_spellings() {
        let args: Vec<String> = ["a", "--out", "x", "--out=y", "--cache-only", "b"].iter().map(|s| s.to_string()).collect();
        let stripped = strip_flag(&strip_flag(&args, "--out", true), "--cache-only", false);
        assert_eq!(stripped, vec!["a", "b"]);
    }

    #[test]
    fn variants_parse() {
        assert_eq!(parse_variants(Some("all"), Variant::Full).unwrap().len(), 4);
        assert_eq!(parse_variants(None, Variant::Base).unwrap(), vec![Variant::Base]);
        assert!(parse_variants(Some("bogus"), Variant::Full).is_err());
    }
}
