//! Requirement corpora, human annotation sets, codebooks and exemplar pools.
//!
//! Corpus and annotation files are comma-separated with a header row. A corpus
//! file carries the columns `id,text` (the `id` column may be left blank, in
//! which case ids are derived from the file stem and the 1-based row index).
//! Annotation files carry `requirement_id,label`. Codebooks are TOML documents.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: empty corpus")]
    EmptyCorpus { path: PathBuf },
    #[error("{path}: line {line}: duplicate id {id:?}")]
    DuplicateId { path: PathBuf, line: u64, id: String },
    #[error("invalid codebook {path}: {message}")]
    InvalidCodebook { path: PathBuf, message: String },
    #[error("annotation set {annotator}: requirement {id:?} is not in the corpus")]
    UnknownRequirement { annotator: String, id: String },
    #[error("consensus requires two human annotation sets, got {0} and {1}")]
    NotHuman(AnnotationKind, AnnotationKind),
    #[error("annotation sets {0} and {1} share no requirement ids")]
    DisjointCoverage(String, String),
    #[error("cannot draw {requested} exemplars from {available} eligible gold items")]
    NotEnoughGold { requested: usize, available: usize },
}

/// One atomic requirement sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementStatement {
    pub id: String,
    pub text: String,
    pub test_case: String,
    pub source_doc: String,
}

fn doc_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string())
}

fn read_utf8(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
}

/// Reads a corpus file. Statements come back in file order.
pub fn ingest_corpus(path: &Path, test_case: &str) -> Result<Vec<RequirementStatement>, CorpusError> {
    let content = read_utf8(path)?;
    let source_doc = doc_name(path);
    let malformed = |line: u64, message: String| CorpusError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(content.as_bytes());
    let headers = match reader.headers() {
        Ok(h) if h.iter().any(|f| !f.trim().is_empty()) => h.clone(),
        Ok(_) => {
            return Err(CorpusError::EmptyCorpus {
                path: path.to_path_buf(),
            })
        }
        Err(e) => return Err(malformed(1, e.to_string())),
    };
    let text_col =
        header_index(&headers, "text").ok_or_else(|| malformed(1, "missing `text` column".into()))?;
    let id_col = header_index(&headers, "id");

    let mut statements = Vec::new();
    let mut seen = HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
            malformed(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
        let text = record
            .get(text_col)
            .ok_or_else(|| malformed(line, "missing text field".into()))?
            .trim();
        if text.is_empty() {
            return Err(malformed(line, "blank requirement text".into()));
        }
        let id = match id_col.and_then(|c| record.get(c)).map(str::trim) {
            Some(id) if !id.is_empty() => id.to_string(),
            _ => format!("{}:{}", source_doc, row + 1),
        };
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id,
            });
        }
        statements.push(RequirementStatement {
            id,
            text: text.to_string(),
            test_case: test_case.to_string(),
            source_doc: source_doc.clone(),
        });
    }
    if statements.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    Ok(statements)
}

/// Loads several corpus files and checks id uniqueness across all of them.
pub fn ingest_corpora(paths: &[PathBuf], test_case: &str) -> Result<Vec<RequirementStatement>, CorpusError> {
    let mut all: Vec<RequirementStatement> = Vec::new();
    let mut seen = HashSet::new();
    for path in paths {
        for (i, statement) in ingest_corpus(path, test_case)?.into_iter().enumerate() {
            if !seen.insert(statement.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    path: path.clone(),
                    line: i as u64 + 2,
                    id: statement.id,
                });
            }
            all.push(statement);
        }
    }
    Ok(all)
}

/// Serializes statements in the corpus format, ids always explicit.
pub fn write_corpus<W: std::io::Write>(
    statements: &[RequirementStatement],
    out: W,
) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["id", "text"])?;
    for s in statements {
        writer.write_record([s.id.as_str(), s.text.as_str()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Canonical label set for one test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub test_case: String,
    /// Human-readable system name substituted for `{system_type}` in prompts.
    pub system_type: String,
    pub labels: Vec<String>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
    #[serde(rename = "brief_description")]
    pub system_description_brief: String,
    #[serde(rename = "full_description")]
    pub system_description_full: String,
}

impl Codebook {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let content = read_utf8(path)?;
        let codebook: Codebook = toml::from_str(&content).map_err(|e| CorpusError::InvalidCodebook {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        codebook.validate().map_err(|message| CorpusError::InvalidCodebook {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(codebook)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.labels.is_empty() {
            return Err("labels must not be empty".into());
        }
        let mut folded = HashSet::new();
        for label in &self.labels {
            let norm = fold(label);
            if norm.is_empty() || norm.contains(' ') || norm != label.to_lowercase() {
                return Err(format!("label {label:?} is not a single token"));
            }
            if !folded.insert(norm) {
                return Err(format!("label {label:?} is listed twice"));
            }
        }
        for (raw, canonical) in &self.synonyms {
            if !self.labels.contains(canonical) {
                return Err(format!("synonym {raw:?} maps to unknown label {canonical:?}"));
            }
        }
        if self.system_type.trim().is_empty() {
            return Err("system_type must not be empty".into());
        }
        if self.system_description_brief.trim().is_empty() {
            return Err("brief_description must not be empty".into());
        }
        if self.system_description_full.trim().is_empty() {
            return Err("full_description must not be empty".into());
        }
        Ok(())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        crate::sha256_hex(serde_json::to_string(self).expect("codebook serializes").as_bytes())
    }
}

/// Result of mapping a raw label string onto a codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedLabel {
    pub label: String,
    pub matched: bool,
}

/// Unicode-normalize, trim, lowercase, strip edge punctuation/quotes and
/// collapse internal whitespace.
fn fold(raw: &str) -> String {
    let lowered: String = raw.nfkc().collect::<String>().to_lowercase();
    let stripped = lowered.trim_matches(|c: char| !c.is_alphanumeric());
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn normalize_label(raw: &str, codebook: &Codebook) -> NormalizedLabel {
    let folded = fold(raw);
    if let Some(label) = codebook.labels.iter().find(|l| l.to_lowercase() == folded) {
        return NormalizedLabel {
            label: label.clone(),
            matched: true,
        };
    }
    if let Some((_, canonical)) = codebook.synonyms.iter().find(|(k, _)| fold(k) == folded) {
        return NormalizedLabel {
            label: canonical.clone(),
            matched: true,
        };
    }
    NormalizedLabel {
        label: folded,
        matched: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Human,
    Model,
    Consensus,
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotationKind::Human => "human",
            AnnotationKind::Model => "model",
            AnnotationKind::Consensus => "consensus",
        })
    }
}

/// Single-label annotations from one rater.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub annotator: String,
    pub kind: AnnotationKind,
    pub entries: BTreeMap<String, String>,
}

impl AnnotationSet {
    pub fn new(annotator: impl Into<String>, kind: AnnotationKind) -> Self {
        Self {
            annotator: annotator.into(),
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn from_pairs<I, K, V>(annotator: &str, kind: AnnotationKind, pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            annotator: annotator.to_string(),
            kind,
            entries: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    /// Keeps only the given ids.
    pub fn restricted_to(&self, ids: &BTreeSet<String>) -> AnnotationSet {
        AnnotationSet {
            annotator: self.annotator.clone(),
            kind: self.kind,
            entries: self
                .entries
                .iter()
                .filter(|(id, _)| ids.contains(*id))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Reads a `requirement_id,label` file. When `corpus` is given every id
    /// must exist in it.
    pub fn load(
        path: &Path,
        annotator: &str,
        kind: AnnotationKind,
        corpus: Option<&[RequirementStatement]>,
    ) -> Result<Self, CorpusError> {
        let content = read_utf8(path)?;
        let malformed = |line: u64, message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new().from_reader(content.as_bytes());
        let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
        let id_col = header_index(&headers, "requirement_id")
            .ok_or_else(|| malformed(1, "missing `requirement_id` column".into()))?;
        let label_col =
            header_index(&headers, "label").ok_or_else(|| malformed(1, "missing `label` column".into()))?;
        let known: Option<HashSet<&str>> = corpus.map(|c| c.iter().map(|s| s.id.as_str()).collect());

        let mut set = AnnotationSet::new(annotator, kind);
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
                malformed(line, e.to_string())
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
            let id = record.get(id_col).unwrap_or("").trim();
            let label = record.get(label_col).unwrap_or("").trim();
            if id.is_empty() {
                return Err(malformed(line, "blank requirement_id".into()));
            }
            if label.is_empty() {
                return Err(malformed(line, "blank label".into()));
            }
            if let Some(known) = &known {
                if !known.contains(id) {
                    return Err(CorpusError::UnknownRequirement {
                        annotator: annotator.to_string(),
                        id: id.to_string(),
                    });
                }
            }
            if set.entries.insert(id.to_string(), label.to_string()).is_some() {
                return Err(CorpusError::DuplicateId {
                    path: path.to_path_buf(),
                    line,
                    id: id.to_string(),
                });
            }
        }
        Ok(set)
    }

    pub fn write<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["requirement_id", "label"])?;
        for (id, label) in &self.entries {
            writer.write_record([id.as_str(), label.as_str()])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Maps every label through [`normalize_label`].
    pub fn normalized(&self, codebook: &Codebook) -> AnnotationSet {
        AnnotationSet {
            annotator: self.annotator.clone(),
            kind: self.kind,
            entries: self
                .entries
                .iter()
                .map(|(id, label)| (id.clone(), normalize_label(label, codebook).label))
                .collect(),
        }
    }

    pub fn content_hash(&self) -> String {
        crate::sha256_hex(serde_json::to_string(&self.entries).expect("entries serialize").as_bytes())
    }
}

/// Gold labels: items on which both analysts assigned the same normalized label.
pub fn build_consensus(
    a: &AnnotationSet,
    b: &AnnotationSet,
    codebook: &Codebook,
) -> Result<AnnotationSet, CorpusError> {
    if a.kind != AnnotationKind::Human || b.kind != AnnotationKind::Human {
        return Err(CorpusError::NotHuman(a.kind, b.kind));
    }
    let mut shared = 0usize;
    let mut gold = AnnotationSet::new(
        {
            let mut names = [a.annotator.as_str(), b.annotator.as_str()];
            names.sort();
            format!("consensus({}+{})", names[0], names[1])
        },
        AnnotationKind::Consensus,
    );
    for (id, label_a) in &a.entries {
        let Some(label_b) = b.entries.get(id) else { continue };
        shared += 1;
        let na = normalize_label(label_a, codebook);
        let nb = normalize_label(label_b, codebook);
        if na == nb {
            gold.entries.insert(id.clone(), na.label);
        }
    }
    if shared == 0 {
        return Err(CorpusError::DisjointCoverage(a.annotator.clone(), b.annotator.clone()));
    }
    Ok(gold)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub requirement_id: String,
    pub text: String,
    pub label: String,
}

/// Labelled examples shown in deductive prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarPool {
    pub exemplars: Vec<Exemplar>,
    pub seed: u64,
}

impl ExemplarPool {
    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.exemplars.iter().map(|e| e.requirement_id.clone()).collect()
    }
}

/// Draws `k` exemplars from gold, stratified round-robin over the sorted
/// label set, with a seeded shuffle inside each label bucket. Only gold items
/// whose label is a codebook label are eligible. Returns the pool and the
/// evaluation id set (gold ids minus exemplar ids).
pub fn split_exemplars(
    gold: &AnnotationSet,
    corpus: &[RequirementStatement],
    codebook: &Codebook,
    k: usize,
    seed: u64,
) -> Result<(ExemplarPool, BTreeSet<String>), CorpusError> {
    let texts: BTreeMap<&str, &str> = corpus.iter().map(|s| (s.id.as_str(), s.text.as_str())).collect();
    let mut buckets: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, label) in &gold.entries {
        if codebook.contains(label) && texts.contains_key(id.as_str()) {
            buckets.entry(label.as_str()).or_default().push(id.as_str());
        }
    }
    let available: usize = buckets.values().map(Vec::len).sum();
    if k > available {
        return Err(CorpusError::NotEnoughGold { requested: k, available });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in buckets.values_mut() {
        // entries come from a BTreeMap so each bucket starts sorted
        ids.shuffle(&mut rng);
    }
    let mut exemplars = Vec::with_capacity(k);
    let mut depth = 0;
    while exemplars.len() < k {
        for (label, ids) in &buckets {
            if exemplars.len() == k {
                break;
            }
            if let Some(id) = ids.get(depth) {
                exemplars.push(Exemplar {
                    requirement_id: id.to_string(),
                    text: texts[id].to_string(),
                    label: label.to_string(),
                });
            }
        }
        depth += 1;
    }

    let pool = ExemplarPool { exemplars, seed };
    let chosen = pool.ids();
    let evaluation = gold
        .entries
        .keys()
        .filter(|id| !chosen.contains(*id))
        .cloned()
        .collect();
    Ok((pool, evaluation))
}
