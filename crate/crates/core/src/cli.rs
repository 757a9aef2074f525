//! Command-line entry point: config loading and the five subcommands.
//!
//! Exit codes: 0 success, 2 invalid input, 3 metric precondition,
//! 4 store/manifest conflict, 5 transport exhaustion.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{
    build_consensus, ingest_corpora, split_exemplars, AnnotationKind, AnnotationSet, Codebook, CorpusError,
    RequirementStatement,
};
use crate::llm::{BackendMode, LlmClient, LlmError, ModelConfig, ResponseCache};
use crate::metrics::{cohen_kappa, AgreementResult, MetricsError};
use crate::prompt::{condition_grid, Condition, GridFilter, PromptError, PromptTemplates};
use crate::report::{build_reports, write_reports, ReportError, ReportOptions, Section};
use crate::runner::{run_experiment, ExperimentInputs, ExperimentSpec, RunOptions, RunSummary, RunnerError};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_METRIC: i32 = 3;
pub const EXIT_STORE: i32 = 4;
pub const EXIT_TRANSPORT: i32 = 5;

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let code = match e {
            CorpusError::DisjointCoverage(..) => EXIT_METRIC,
            _ => EXIT_INPUT,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::new(EXIT_INPUT, e.to_string())
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        let code = if e.is_transport() { EXIT_TRANSPORT } else { EXIT_INPUT };
        CliError::new(code, e.to_string())
    }
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> Self {
        let code = match e {
            RunnerError::InvalidSpec(_) | RunnerError::Prompt(_) => EXIT_INPUT,
            RunnerError::Io { .. } => 1,
            _ => EXIT_STORE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Store(inner) => inner.into(),
            other => CliError::new(EXIT_METRIC, other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        let code = match e {
            ReportError::Io { .. } => 1,
            ReportError::UnknownSection(_) => EXIT_INPUT,
            ReportError::EmptyGold => EXIT_METRIC,
        };
        CliError::new(code, e.to_string())
    }
}

fn default_n_runs() -> usize {
    1
}
fn default_seed() -> u64 {
    42
}
fn default_parallelism() -> usize {
    4
}
fn default_exemplars() -> usize {
    3
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Size of the exemplar pool held out of evaluation.
    #[serde(default = "default_exemplars")]
    pub exemplars: usize,
    #[serde(default)]
    pub shots: Vec<String>,
    #[serde(default)]
    pub lengths: Vec<String>,
    #[serde(default)]
    pub contexts: Vec<String>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            n_runs: default_n_runs(),
            seed: default_seed(),
            parallelism: default_parallelism(),
            exemplars: default_exemplars(),
            shots: Vec::new(),
            lengths: Vec::new(),
            contexts: Vec::new(),
        }
    }
}

/// The single TOML config file. Relative paths resolve against the
/// directory holding the config.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub test_case: String,
    pub corpus: Vec<PathBuf>,
    pub codebook: PathBuf,
    /// Two human annotation files merged into consensus gold.
    #[serde(default)]
    pub annotations: Vec<PathBuf>,
    /// Ready-made gold labels; used instead of `annotations`.
    #[serde(default)]
    pub gold: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub unlabeled_examples: bool,
    #[serde(default = "default_true")]
    pub cache: bool,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
}

fn must_exist(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new(EXIT_INPUT, format!("{}: no such file", path.display())))
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        must_exist(path)?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
        let mut config: AppConfig =
            toml::from_str(&text).map_err(|e| CliError::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus.iter_mut().for_each(join);
        join(&mut self.codebook);
        self.annotations.iter_mut().for_each(join);
        self.gold.iter_mut().for_each(join);
        join(&mut self.output_dir);
        self.templates.iter_mut().for_each(join);
        for m in &mut self.models {
            m.mock_script.iter_mut().for_each(join);
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.corpus.is_empty() {
            return Err(CliError::new(EXIT_INPUT, "config lists no corpus files"));
        }
        for p in self.corpus.iter().chain([&self.codebook]).chain(&self.annotations) {
            must_exist(p)?;
        }
        for p in self.gold.iter().chain(&self.templates) {
            must_exist(p)?;
        }
        match (self.annotations.len(), &self.gold) {
            (0, Some(_)) | (2, None) => {}
            _ => {
                return Err(CliError::new(
                    EXIT_INPUT,
                    "config needs either `gold` or exactly two `annotations` files",
                ))
            }
        }
        for m in &self.models {
            m.validate()?;
            if let Some(script) = &m.mock_script {
                must_exist(script)?;
            }
        }
        Ok(())
    }

    pub fn store_dir(&self) -> PathBuf {
        self.output_dir.join("store")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    pub fn cache_path(&self) -> PathBuf {
        self.output_dir.join("cache").join("responses.jsonl")
    }
}

/// Corpus, codebook and gold loaded from an [`AppConfig`].
#[derive(Debug, Clone)]
pub struct LoadedInputs {
    pub corpus: Vec<RequirementStatement>,
    pub codebook: Codebook,
    pub gold: AnnotationSet,
    /// Human sets the gold was built from, if any.
    pub analysts: Vec<AnnotationSet>,
}

fn annotator_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn load_inputs(config: &AppConfig) -> Result<LoadedInputs, CliError> {
    let corpus = ingest_corpora(&config.corpus, &config.test_case)?;
    let codebook = Codebook::load(&config.codebook)?;
    if codebook.test_case != config.test_case {
        return Err(CliError::new(
            EXIT_INPUT,
            format!(
                "{}: codebook is for test case {:?}, config says {:?}",
                config.codebook.display(),
                codebook.test_case,
                config.test_case
            ),
        ));
    }
    let (gold, analysts) = match &config.gold {
        Some(path) => {
            let gold = AnnotationSet::load(path, "gold", AnnotationKind::Consensus, Some(&corpus))?;
            (gold.normalized(&codebook), Vec::new())
        }
        None => {
            let sets = config
                .annotations
                .iter()
                .map(|p| AnnotationSet::load(p, &annotator_name(p), AnnotationKind::Human, Some(&corpus)))
                .collect::<Result<Vec<_>, _>>()?;
            (build_consensus(&sets[0], &sets[1], &codebook)?, sets)
        }
    };
    Ok(LoadedInputs {
        corpus,
        codebook,
        gold,
        analysts,
    })
}

#[derive(Debug, Parser)]
#[command(name = "reqqda", version, about = "LLM-assisted qualitative coding of requirements")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the corpus, codebook and annotations named in a config.
    Ingest(ConfigArg),
    /// Cohen's kappa between two annotation files.
    Agreement(AgreementArgs),
    /// Execute the prompt grid and write the run store.
    Run(RunArgs),
    /// Recompute report tables from the run store.
    Report(ReportArgs),
    /// Repeated runs at the reference condition, then the consistency table.
    Consistency(ConsistencyArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    pub first: PathBuf,
    pub second: PathBuf,
    /// Fold labels through this codebook's synonyms before comparing.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct GridArgs {
    /// Comma-separated model ids from the config.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub shots: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub contexts: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Stop after this many new records (the store stays resumable).
    #[arg(long, hide = true)]
    pub max_records: Option<usize>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    /// Comma-separated sections: kappa_by_shot, kappa_by_length,
    /// kappa_by_context, kappa, consistency, performance, trace, domain.
    #[arg(long)]
    pub only: Option<String>,
    /// Model whose labels seed the domain-model skeleton.
    #[arg(long)]
    pub domain_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub grid: GridArgs,
}

fn print(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{text}").map_err(|e| CliError::new(1, e.to_string()))
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&AppConfig::load(&a.config)?, out),
        Command::Agreement(a) => {
            let codebook = a.codebook.as_deref().map(Codebook::load).transpose()?;
            let r = cmd_agreement(&a.first, &a.second, codebook.as_ref())?;
            print(out, format_args!("kappa={}", r.kappa))?;
            print(out, format_args!("p_o={}", r.observed_agreement))?;
            print(out, format_args!("p_e={}", r.expected_agreement))?;
            print(out, format_args!("n={}", r.n))
        }
        Command::Run(a) => {
            let mut config = AppConfig::load(&a.config)?;
            if let Some(n) = a.runs {
                config.experiment.n_runs = n;
            }
            if let Some(p) = a.parallelism {
                config.experiment.parallelism = p;
            }
            let options = RunOptions {
                resume: a.resume,
                max_new_records: a.max_records,
            };
            let summary = cmd_run(&config, &a.grid, &config.store_dir(), options)?;
            report_summary(&summary, out)
        }
        Command::Report(a) => {
            let config = AppConfig::load(&a.config)?;
            let sections = a.only.as_deref().map(Section::parse_list).transpose()?;
            let options = ReportOptions {
                domain_model: a.domain_model,
                sections,
                ..ReportOptions::default()
            };
            let files = cmd_report(&config, &config.store_dir(), &config.reports_dir(), &options)?;
            print(out, format_args!("wrote {} files to {}", files.len(), config.reports_dir().display()))
        }
        Command::Consistency(a) => {
            let mut config = AppConfig::load(&a.config)?;
            config.experiment.n_runs = a.runs;
            cmd_consistency(&config, &a.grid, a.resume, out)
        }
    }
}

fn report_summary(summary: &RunSummary, out: &mut dyn Write) -> Result<(), CliError> {
    print(
        out,
        format_args!(
            "planned {} records: {} already stored, {} written, {} errors",
            summary.planned, summary.skipped, summary.written, summary.errors
        ),
    )?;
    if summary.transport_errors > 0 {
        return Err(CliError::new(
            EXIT_TRANSPORT,
            format!("{} requests failed after exhausting retries", summary.transport_errors),
        ));
    }
    Ok(())
}

pub fn cmd_ingest(config: &AppConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let inputs = load_inputs(config)?;
    print(
        out,
        format_args!(
            "{}: {} statements, {} gold labels, {} codebook labels",
            config.test_case,
            inputs.corpus.len(),
            inputs.gold.len(),
            inputs.codebook.labels.len()
        ),
    )?;
    for a in &inputs.analysts {
        print(out, format_args!("  {}: {} annotations", a.annotator, a.len()))?;
    }
    Ok(())
}

/// Kappa between two annotation files, optionally folding labels through a
/// codebook first.
pub fn cmd_agreement(first: &Path, second: &Path, codebook: Option<&Codebook>) -> Result<AgreementResult, CliError> {
    let mut a = AnnotationSet::load(first, &annotator_name(first), AnnotationKind::Human, None)?;
    let mut b = AnnotationSet::load(second, &annotator_name(second), AnnotationKind::Human, None)?;
    if let Some(cb) = codebook {
        a = a.normalized(cb);
        b = b.normalized(cb);
    }
    Ok(cohen_kappa(&a, &b)?)
}

fn select_models(config: &AppConfig, wanted: &[String]) -> Result<Vec<ModelConfig>, CliError> {
    if config.models.is_empty() {
        return Err(CliError::new(EXIT_INPUT, "config lists no models"));
    }
    if wanted.is_empty() {
        return Ok(config.models.clone());
    }
    wanted
        .iter()
        .map(|id| {
            config
                .models
                .iter()
                .find(|m| &m.model_id == id)
                .cloned()
                .ok_or_else(|| CliError::new(EXIT_INPUT, format!("model {id:?} is not in the config")))
        })
        .collect()
}

fn conditions(config: &AppConfig, grid: &GridArgs) -> Result<Vec<Condition>, CliError> {
    let pick = |cli: &Vec<String>, cfg: &Vec<String>| if cli.is_empty() { cfg.clone() } else { cli.clone() };
    let e = &config.experiment;
    let filter = GridFilter::parse(
        &pick(&grid.shots, &e.shots),
        &pick(&grid.lengths, &e.lengths),
        &pick(&grid.contexts, &e.contexts),
    )?;
    Ok(condition_grid(&filter))
}

/// Executes the configured grid into `store_dir`.
pub fn cmd_run(
    config: &AppConfig,
    grid: &GridArgs,
    store_dir: &Path,
    options: RunOptions,
) -> Result<RunSummary, CliError> {
    let inputs = load_inputs(config)?;
    let templates = match &config.templates {
        Some(p) => PromptTemplates::load(p)?,
        None => PromptTemplates::builtin(),
    }
    .with_unlabeled_examples(config.unlabeled_examples);
    let e = &config.experiment;
    let (pool, evaluation_ids) = split_exemplars(&inputs.gold, &inputs.corpus, &inputs.codebook, e.exemplars, e.seed)?;
    let spec = ExperimentSpec {
        models: select_models(config, &grid.models)?,
        conditions: conditions(config, grid)?,
        test_case: config.test_case.clone(),
        n_runs: e.n_runs,
        seed: e.seed,
        parallelism: e.parallelism,
    };
    let cache = if config.cache {
        Some(Arc::new(ResponseCache::open(&config.cache_path())?))
    } else {
        None
    };
    let clients = spec
        .models
        .iter()
        .map(|m| {
            let client = LlmClient::from_config(m.clone())?;
            Ok(match &cache {
                Some(c) => client.with_cache(c.clone()),
                None => client,
            })
        })
        .collect::<Result<Vec<_>, LlmError>>()?;
    for m in &spec.models {
        if m.backend == BackendMode::Live {
            log::info!("{}: live endpoint {}", m.model_id, m.endpoint_url.as_deref().unwrap_or(""));
        }
    }
    let experiment_inputs = ExperimentInputs {
        corpus: &inputs.corpus,
        codebook: &inputs.codebook,
        gold: &inputs.gold,
        pool: &pool,
        evaluation_ids: &evaluation_ids,
        templates: &templates,
    };
    log::info!(
        "{} models x {} conditions x {} runs x {} requirements",
        spec.models.len(),
        spec.conditions.len(),
        spec.n_runs,
        evaluation_ids.len()
    );
    Ok(run_experiment(&spec, &experiment_inputs, &clients, store_dir, options)?)
}

/// Builds and writes the report bundle for the store in `store_dir`.
pub fn cmd_report(
    config: &AppConfig,
    store_dir: &Path,
    reports_dir: &Path,
    options: &ReportOptions,
) -> Result<Vec<String>, CliError> {
    let inputs = load_inputs(config)?;
    let store = crate::runner::RunStore::load(store_dir)?;
    let bundle = build_reports(&store, &inputs.gold, &inputs.codebook, options)?;
    for w in &bundle.warnings {
        log::warn!("{w}");
    }
    Ok(write_reports(&bundle, reports_dir)?)
}

/// Repeated runs go to their own store under `output_dir/consistency` so
/// they never collide with the single-run grid.
pub fn cmd_consistency(config: &AppConfig, grid: &GridArgs, resume: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let options = ReportOptions {
        sections: Some(BTreeSet::from([Section::Consistency])),
        ..ReportOptions::default()
    };
    let mut grid = GridArgs {
        models: grid.models.clone(),
        shots: grid.shots.clone(),
        lengths: grid.lengths.clone(),
        contexts: grid.contexts.clone(),
    };
    let r = options.reference;
    let e = &config.experiment;
    if grid.shots.is_empty() && e.shots.is_empty() {
        grid.shots = vec![r.shot.to_string()];
    }
    if grid.lengths.is_empty() && e.lengths.is_empty() {
        grid.lengths = vec![r.length.to_string()];
    }
    if grid.contexts.is_empty() && e.contexts.is_empty() {
        grid.contexts = vec![r.context.to_string()];
    }
    let root = config.output_dir.join("consistency");
    let summary = cmd_run(
        config,
        &grid,
        &root.join("store"),
        RunOptions {
            resume,
            max_new_records: None,
        },
    )?;
    report_summary(&summary, out)?;
    let reports = root.join("reports");
    cmd_report(config, &root.join("store"), &reports, &options)?;
    let table = std::fs::read_to_string(reports.join("consistency.md"))
        .map_err(|e| CliError::new(1, format!("{}: {e}", reports.display())))?;
    print(out, format_args!("{table}"))
}
