//! Experiment matrix execution and the on-disk run store.
//!
//! A store directory holds `manifest.json` (experiment settings plus SHA-256
//! hashes of the canonicalized inputs) and `records.jsonl` (one [`RunRecord`]
//! per line). Records are written in task order (model, condition, run,
//! requirement) regardless of how many completions run concurrently, so two
//! executions of the same mock experiment produce the same file apart from
//! timestamps and latencies.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_label, AnnotationKind, AnnotationSet, Codebook, ExemplarPool, RequirementStatement};
use crate::llm::{extract_label, BackendKind, BackendMode, LlmClient, LlmError, ModelConfig};
use crate::prompt::{render_prompt, Condition, PromptError, PromptTemplates, RenderedPrompt};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
const STORE_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("no run store at {0}")]
    MissingManifest(PathBuf),
    #[error("run store {0} already exists; resume it or choose another output directory")]
    StoreExists(PathBuf),
    #[error("corpus changed under store: {0} hash differs from the manifest")]
    CorpusChanged(&'static str),
    #[error("experiment settings differ from the store manifest: {0}")]
    SpecChanged(String),
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no records for {model_id} {condition} run {run_index}")]
    EmptySlice {
        model_id: String,
        condition: Condition,
        run_index: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What to run: models x conditions x evaluation requirements x runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub models: Vec<ModelConfig>,
    pub conditions: Vec<Condition>,
    pub test_case: String,
    pub n_runs: usize,
    pub seed: u64,
    pub parallelism: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.models.is_empty() {
            return Err(RunnerError::InvalidSpec("no models".into()));
        }
        let mut ids = HashSet::new();
        for m in &self.models {
            if !ids.insert(m.model_id.as_str()) {
                return Err(RunnerError::InvalidSpec(format!("model {} listed twice", m.model_id)));
            }
        }
        if self.conditions.is_empty() {
            return Err(RunnerError::InvalidSpec("no conditions".into()));
        }
        if self.n_runs == 0 {
            return Err(RunnerError::InvalidSpec("n_runs must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(RunnerError::InvalidSpec("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    /// Repeated runs measure model variability, so each run gets its own
    /// cache key.
    pub fn consistency_mode(&self) -> bool {
        self.n_runs > 1
    }
}

/// Everything an experiment reads besides the spec.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentInputs<'a> {
    pub corpus: &'a [RequirementStatement],
    pub codebook: &'a Codebook,
    pub gold: &'a AnnotationSet,
    pub pool: &'a ExemplarPool,
    pub evaluation_ids: &'a BTreeSet<String>,
    pub templates: &'a PromptTemplates,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHashes {
    pub corpus: String,
    pub codebook: String,
    pub gold: String,
    pub exemplars: String,
    pub templates: String,
}

fn json_hash<T: Serialize + ?Sized>(value: &T) -> String {
    crate::sha256_hex(serde_json::to_string(value).expect("input serializes").as_bytes())
}

impl InputHashes {
    pub fn of(inputs: &ExperimentInputs<'_>) -> Self {
        InputHashes {
            corpus: json_hash(inputs.corpus),
            codebook: inputs.codebook.content_hash(),
            gold: inputs.gold.content_hash(),
            exemplars: json_hash(&(inputs.pool, inputs.evaluation_ids)),
            templates: inputs.templates.content_hash(),
        }
    }
}

/// Model settings recorded in the manifest. Never carries credentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: String,
    pub backend: BackendMode,
    pub endpoint_url: Option<String>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl From<&ModelConfig> for ModelEntry {
    fn from(c: &ModelConfig) -> Self {
        ModelEntry {
            model_id: c.model_id.clone(),
            backend: c.backend,
            endpoint_url: c.endpoint_url.clone(),
            temperature: c.temperature,
            max_output_tokens: c.max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub test_case: String,
    pub models: Vec<ModelEntry>,
    pub conditions: Vec<Condition>,
    pub n_runs: usize,
    pub seed: u64,
    pub exemplar_ids: Vec<String>,
    pub evaluation_ids: Vec<String>,
    pub inputs: InputHashes,
}

impl Manifest {
    pub fn new(spec: &ExperimentSpec, inputs: &ExperimentInputs<'_>) -> Self {
        Manifest {
            format: STORE_FORMAT,
            test_case: spec.test_case.clone(),
            models: spec.models.iter().map(ModelEntry::from).collect(),
            conditions: spec.conditions.clone(),
            n_runs: spec.n_runs,
            seed: spec.seed,
            exemplar_ids: inputs.pool.exemplars.iter().map(|e| e.requirement_id.clone()).collect(),
            evaluation_ids: inputs.evaluation_ids.iter().cloned().collect(),
            inputs: InputHashes::of(inputs),
        }
    }

    /// Checks that `other` describes the same experiment over the same inputs.
    pub fn check_resumable(&self, other: &Manifest) -> Result<(), RunnerError> {
        let (a, b) = (&self.inputs, &other.inputs);
        for (name, x, y) in [
            ("corpus", &a.corpus, &b.corpus),
            ("codebook", &a.codebook, &b.codebook),
            ("gold", &a.gold, &b.gold),
            ("exemplar split", &a.exemplars, &b.exemplars),
            ("prompt template", &a.templates, &b.templates),
        ] {
            if x != y {
                return Err(RunnerError::CorpusChanged(name));
            }
        }
        if self != other {
            return Err(RunnerError::SpecChanged(
                "models, conditions, n_runs or seed differ".into(),
            ));
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, RunnerError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(RunnerError::MissingManifest(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| RunnerError::Corrupt {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn write(&self, dir: &Path) -> Result<(), RunnerError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    /// SHA-256 of the manifest's canonical JSON, quoted in every report.
    pub fn content_hash(&self) -> String {
        crate::sha256_hex(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    /// `transport`, `auth`, `rejected`, `protocol`, `mock` or `extraction`.
    pub kind: String,
    pub message: String,
}

/// One model response for one requirement under one condition and run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub requirement_id: String,
    pub model_id: String,
    #[serde(flatten)]
    pub condition: Condition,
    pub run_index: usize,
    pub raw_text: Option<String>,
    pub extracted_label: Option<String>,
    pub normalized_label: Option<String>,
    pub matched_codebook: bool,
    pub error: Option<RecordError>,
    pub backend: Option<BackendKind>,
    pub attempt_count: u32,
    pub prompt_sha256: String,
    pub timestamp: String,
    pub latency_ms: u64,
}

impl RunRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            model_id: self.model_id.clone(),
            condition: self.condition,
            run_index: self.run_index,
            requirement_id: self.requirement_id.clone(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub model_id: String,
    pub condition: Condition,
    pub run_index: usize,
    pub requirement_id: String,
}

/// Model labels for one (model, condition, run) slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceAnnotations {
    pub annotations: AnnotationSet,
    /// Requirements omitted because their record is an error record.
    pub errors: usize,
}

/// Loaded run store. Every metric can be recomputed from this alone.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStore {
    pub manifest: Manifest,
    pub records: Vec<RunRecord>,
}

/// Reads records, tolerating a torn final line. Returns the records and the
/// byte length of the well-formed prefix.
fn read_records(path: &Path) -> Result<(Vec<RunRecord>, u64), RunnerError> {
    let mut records = Vec::new();
    if !path.exists() {
        return Ok((records, 0));
    }
    let mut reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut good_len = 0u64;
    let mut line = String::new();
    let mut line_no = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(io_err(path))?;
        if read == 0 {
            break;
        }
        line_no += 1;
        let complete = line.ends_with('\n');
        if line.trim().is_empty() {
            good_len += read as u64;
            continue;
        }
        if !complete {
            log::warn!("{}: ignoring torn final line {line_no}", path.display());
            break;
        }
        let record = serde_json::from_str::<RunRecord>(line.trim_end()).map_err(|e| RunnerError::Corrupt {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(record);
        good_len += read as u64;
    }
    Ok((records, good_len))
}

impl RunStore {
    pub fn load(dir: &Path) -> Result<Self, RunnerError> {
        let manifest = Manifest::read(dir)?;
        let (records, _) = read_records(&dir.join(RECORDS_FILE))?;
        Ok(RunStore { manifest, records })
    }

    pub fn evaluation_ids(&self) -> BTreeSet<String> {
        self.manifest.evaluation_ids.iter().cloned().collect()
    }

    /// Gold restricted to the items this store evaluated.
    pub fn evaluation_gold(&self, gold: &AnnotationSet) -> AnnotationSet {
        gold.restricted_to(&self.evaluation_ids())
    }

    /// Model ids present in the records, sorted.
    pub fn model_ids(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.model_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn run_indexes(&self, model_id: &str, condition: Condition) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.model_id == model_id && r.condition == condition)
            .map(|r| r.run_index)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn slice<'a>(
        &'a self,
        model_id: &'a str,
        condition: Condition,
        run_index: usize,
    ) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.model_id == model_id && r.condition == condition && r.run_index == run_index)
    }

    /// Normalized model labels for one slice; error records are left out and
    /// counted.
    pub fn annotations_for(
        &self,
        model_id: &str,
        condition: Condition,
        run_index: usize,
    ) -> Result<SliceAnnotations, RunnerError> {
        let mut annotations = AnnotationSet::new(
            format!("{model_id}|{condition}|run{run_index}"),
            AnnotationKind::Model,
        );
        let mut errors = 0;
        let mut seen = 0;
        for record in self.slice(model_id, condition, run_index) {
            seen += 1;
            match (&record.error, &record.normalized_label) {
                (None, Some(label)) => {
                    annotations.entries.insert(record.requirement_id.clone(), label.clone());
                }
                _ => errors += 1,
            }
        }
        if seen == 0 {
            return Err(RunnerError::EmptySlice {
                model_id: model_id.to_string(),
                condition,
                run_index,
            });
        }
        Ok(SliceAnnotations { annotations, errors })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after writing this many new records.
    pub max_new_records: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub planned: usize,
    pub skipped: usize,
    pub written: usize,
    pub errors: usize,
    pub transport_errors: usize,
}

struct Task<'a> {
    client: &'a LlmClient,
    prompt: &'a RenderedPrompt,
    prompt_sha256: &'a str,
    run_index: usize,
}

fn error_kind(e: &LlmError) -> &'static str {
    match e {
        LlmError::Exhausted { .. } => "transport",
        LlmError::Auth { .. } | LlmError::MissingApiKey(_) => "auth",
        LlmError::Rejected { .. } => "rejected",
        LlmError::NoScriptedResponse(_) | LlmError::MockScript { .. } => "mock",
        LlmError::EmptyCompletion => "extraction",
        _ => "protocol",
    }
}

fn execute(task: &Task<'_>, codebook: &Codebook, per_run_key: bool) -> RunRecord {
    let prompt = task.prompt;
    let mut record = RunRecord {
        requirement_id: prompt.requirement_id.clone(),
        model_id: task.client.config().model_id.clone(),
        condition: prompt.condition,
        run_index: task.run_index,
        raw_text: None,
        extracted_label: None,
        normalized_label: None,
        matched_codebook: false,
        error: None,
        backend: None,
        attempt_count: 0,
        prompt_sha256: task.prompt_sha256.to_string(),
        timestamp: String::new(),
        latency_ms: 0,
    };
    let fail = |record: &mut RunRecord, e: &LlmError| {
        record.error = Some(RecordError {
            kind: error_kind(e).to_string(),
            message: e.to_string(),
        });
    };
    match task.client.complete_run(prompt, task.run_index, per_run_key) {
        Ok(result) => {
            record.backend = Some(result.backend);
            record.attempt_count = result.attempt_count;
            record.latency_ms = result.latency_ms;
            match extract_label(&result.raw_text) {
                Ok(label) => {
                    let normalized = normalize_label(&label, codebook);
                    record.extracted_label = Some(label);
                    record.normalized_label = Some(normalized.label);
                    record.matched_codebook = normalized.matched;
                }
                Err(e) => fail(&mut record, &e),
            }
            record.raw_text = Some(result.raw_text);
        }
        Err(e) => fail(&mut record, &e),
    }
    record.timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    record
}

/// Runs every (model, condition, run, evaluation requirement) cell not yet in
/// the store. Failed completions become error records; the run carries on.
pub fn run_experiment(
    spec: &ExperimentSpec,
    inputs: &ExperimentInputs<'_>,
    clients: &[LlmClient],
    store_dir: &Path,
    options: RunOptions,
) -> Result<RunSummary, RunnerError> {
    spec.validate()?;
    let client_ids: Vec<&str> = clients.iter().map(|c| c.config().model_id.as_str()).collect();
    let spec_ids: Vec<&str> = spec.models.iter().map(|m| m.model_id.as_str()).collect();
    if client_ids != spec_ids {
        return Err(RunnerError::InvalidSpec(format!(
            "clients {client_ids:?} do not match models {spec_ids:?}"
        )));
    }
    let evaluation: Vec<&RequirementStatement> = inputs
        .corpus
        .iter()
        .filter(|s| inputs.evaluation_ids.contains(&s.id))
        .collect();
    if evaluation.is_empty() {
        return Err(RunnerError::InvalidSpec("evaluation set is empty".into()));
    }
    if let Some(id) = inputs.pool.ids().intersection(inputs.evaluation_ids).next() {
        return Err(RunnerError::InvalidSpec(format!("exemplar {id} is also in the evaluation set")));
    }

    let manifest = Manifest::new(spec, inputs);
    let records_path = store_dir.join(RECORDS_FILE);
    let mut done: HashSet<RecordKey> = HashSet::new();
    if store_dir.join(MANIFEST_FILE).exists() {
        if !options.resume {
            return Err(RunnerError::StoreExists(store_dir.to_path_buf()));
        }
        Manifest::read(store_dir)?.check_resumable(&manifest)?;
        let (records, good_len) = read_records(&records_path)?;
        if records_path.exists() && std::fs::metadata(&records_path).map_err(io_err(&records_path))?.len() != good_len {
            let file = OpenOptions::new().write(true).open(&records_path).map_err(io_err(&records_path))?;
            file.set_len(good_len).map_err(io_err(&records_path))?;
        }
        done.extend(records.iter().map(RunRecord::key));
    } else {
        std::fs::create_dir_all(store_dir).map_err(io_err(store_dir))?;
        manifest.write(store_dir)?;
    }

    // prompts depend on (condition, requirement) only
    let mut prompts: BTreeMap<(Condition, usize), (RenderedPrompt, String)> = BTreeMap::new();
    for condition in &spec.conditions {
        for (i, requirement) in evaluation.iter().enumerate() {
            let prompt = render_prompt(inputs.templates, *condition, requirement, inputs.codebook, inputs.pool)?;
            let hash = crate::sha256_hex(prompt.text.as_bytes());
            prompts.insert((*condition, i), (prompt, hash));
        }
    }

    let mut summary = RunSummary::default();
    let mut tasks = Vec::new();
    for client in clients {
        for condition in &spec.conditions {
            for run_index in 0..spec.n_runs {
                for (i, requirement) in evaluation.iter().enumerate() {
                    summary.planned += 1;
                    let key = RecordKey {
                        model_id: client.config().model_id.clone(),
                        condition: *condition,
                        run_index,
                        requirement_id: requirement.id.clone(),
                    };
                    if done.contains(&key) {
                        summary.skipped += 1;
                        continue;
                    }
                    let (prompt, hash) = &prompts[&(*condition, i)];
                    tasks.push(Task {
                        client,
                        prompt,
                        prompt_sha256: hash,
                        run_index,
                    });
                }
            }
        }
    }

    let limit = options.max_new_records.unwrap_or(usize::MAX);
    if tasks.is_empty() || limit == 0 {
        return Ok(summary);
    }
    let mut out = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)
        .map_err(io_err(&records_path))?;
    let per_run_key = spec.consistency_mode();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = spec.parallelism.min(tasks.len());

    std::thread::scope(|scope| -> Result<(), RunnerError> {
        let (tx, rx) = mpsc::channel::<(usize, RunRecord)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (tasks, next, stop) = (&tasks, &next, &stop);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() || stop.load(Ordering::SeqCst) {
                    break;
                }
                let record = execute(&tasks[i], inputs.codebook, per_run_key);
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // single writer, restoring task order
        let mut pending = BTreeMap::new();
        let mut next_write = 0;
        'receive: for (i, record) in rx {
            pending.insert(i, record);
            while let Some(record) = pending.remove(&next_write) {
                let mut line = serde_json::to_string(&record).expect("record serializes");
                line.push('\n');
                out.write_all(line.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(io_err(&records_path))?;
                next_write += 1;
                summary.written += 1;
                if let Some(e) = &record.error {
                    summary.errors += 1;
                    if e.kind == "transport" {
                        summary.transport_errors += 1;
                    }
                    log::warn!(
                        "{} {} run {} {}: {}",
                        record.model_id,
                        record.condition,
                        record.run_index,
                        record.requirement_id,
                        e.message
                    );
                }
                if summary.written >= limit {
                    stop.store(true, Ordering::SeqCst);
                    break 'receive;
                }
            }
        }
        Ok(())
    })?;
    Ok(summary)
}
