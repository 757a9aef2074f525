//! Result tables, the traceability matrix and the domain-model skeleton.
//!
//! Every cell is recomputed from a [`RunStore`] through the metrics module.
//! Tables vary one prompt axis while the other two stay at the reference
//! condition (few-shot, long, full context by default). Where a store holds
//! several runs, a cell is the mean of the per-run values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{AnnotationSet, Codebook};
use crate::metrics::{
    classification_report, cohen_kappa, complete_predictions, consistency_analysis, RunScore,
    ERROR_LABEL,
};
use crate::prompt::{Condition, ContextLevel, PromptLength, ShotType};
use crate::runner::RunStore;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown report section {0:?}")]
    UnknownSection(String),
    #[error("evaluation gold is empty for this store")]
    EmptyGold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    KappaByShot,
    KappaByLength,
    KappaByContext,
    Consistency,
    Performance,
    Trace,
    Domain,
}

impl Section {
    pub const ALL: &'static [Section] = &[
        Section::KappaByShot,
        Section::KappaByLength,
        Section::KappaByContext,
        Section::Consistency,
        Section::Performance,
        Section::Trace,
        Section::Domain,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Section::KappaByShot => "kappa_by_shot",
            Section::KappaByLength => "kappa_by_length",
            Section::KappaByContext => "kappa_by_context",
            Section::Consistency => "consistency",
            Section::Performance => "performance",
            Section::Trace => "trace",
            Section::Domain => "domain",
        }
    }

    /// Parses a comma-separated list; `kappa` selects all three kappa tables.
    pub fn parse_list(text: &str) -> Result<BTreeSet<Section>, ReportError> {
        let mut out = BTreeSet::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "kappa" {
                out.extend([Section::KappaByShot, Section::KappaByLength, Section::KappaByContext]);
            } else {
                out.insert(part.parse()?);
            }
        }
        Ok(out)
    }
}

impl FromStr for Section {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Section::ALL
            .iter()
            .find(|sec| sec.as_str() == s || (s == "trace_matrix" && **sec == Section::Trace))
            .copied()
            .ok_or_else(|| ReportError::UnknownSection(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    /// Values held fixed on the axes a table does not vary.
    pub reference: Condition,
    pub run_score: RunScore,
    /// Model whose labels feed the domain skeleton; defaults to the first
    /// model id in lexicographic order.
    pub domain_model: Option<String>,
    /// Sections to build; `None` builds everything.
    pub sections: Option<BTreeSet<Section>>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            reference: Condition::new(ShotType::Few, PromptLength::Long, ContextLevel::Full),
            run_score: RunScore::Kappa,
            domain_model: None,
            sections: None,
        }
    }
}

impl ReportOptions {
    fn wants(&self, section: Section) -> bool {
        self.sections.as_ref().is_none_or(|s| s.contains(&section))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub keys: Vec<String>,
    pub cells: Vec<Option<f64>>,
}

/// A rendered-at-the-edge numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub note: String,
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn cell(&self, keys: &[&str], column: &str) -> Option<f64> {
        let col = self.value_columns.iter().position(|c| c == column)?;
        self.rows
            .iter()
            .find(|r| r.keys.iter().map(String::as_str).eq(keys.iter().copied()))
            .and_then(|r| r.cells[col])
    }

    /// CSV with full-precision values; missing cells are empty.
    pub fn to_csv(&self, manifest_hash: &str) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = self
            .key_columns
            .iter()
            .chain(&self.value_columns)
            .map(String::as_str)
            .collect();
        writer.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let fields: Vec<String> = row
                .keys
                .iter()
                .cloned()
                .chain(row.cells.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()))
                .collect();
            writer.write_record(&fields).expect("in-memory write");
        }
        let body = String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8");
        format!("# manifest_sha256={manifest_hash}\n{body}")
    }

    /// Markdown with values rounded to 3 decimals.
    pub fn to_markdown(&self, manifest_hash: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}\n", self.title);
        let _ = writeln!(out, "{}\n", self.note);
        let _ = writeln!(out, "Run store manifest: `{manifest_hash}`\n");
        let header: Vec<&str> = self
            .key_columns
            .iter()
            .chain(&self.value_columns)
            .map(String::as_str)
            .collect();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        for row in &self.rows {
            let cells: Vec<String> = row
                .keys
                .iter()
                .cloned()
                .chain(row.cells.iter().map(|c| c.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"))))
                .collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }
}

/// One trace-matrix line: a label and the requirements that received it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub model_id: String,
    pub condition: Condition,
    pub run_index: usize,
    pub label: String,
    pub matched_codebook: bool,
    pub requirement_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub manifest_hash: String,
    pub kappa_by_shot: Option<Table>,
    pub kappa_by_length: Option<Table>,
    pub kappa_by_context: Option<Table>,
    pub consistency_table: Option<Table>,
    pub performance_table: Option<Table>,
    pub trace_matrix: Option<Vec<TraceRow>>,
    /// (class name, linked requirement count)
    pub domain_skeleton: Option<Vec<(String, usize)>>,
    pub domain_model_text: Option<String>,
    pub warnings: Vec<String>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

struct Ctx<'a> {
    store: &'a RunStore,
    gold: AnnotationSet,
    models: Vec<String>,
    warnings: Vec<String>,
}

impl Ctx<'_> {
    /// Completed per-run predictions for a slice, or `None` when absent.
    fn runs(&self, model: &str, condition: Condition) -> Option<Vec<(AnnotationSet, usize)>> {
        let runs = self.store.run_indexes(model, condition);
        if runs.is_empty() {
            return None;
        }
        runs.iter()
            .map(|r| {
                self.store
                    .annotations_for(model, condition, *r)
                    .ok()
                    .map(|s| (complete_predictions(&s.annotations, &self.gold), s.errors))
            })
            .collect()
    }

    fn mean_kappa(&mut self, model: &str, condition: Condition) -> Option<f64> {
        let runs = self.runs(model, condition)?;
        let mut scores = Vec::with_capacity(runs.len());
        for (pred, _) in &runs {
            match cohen_kappa(pred, &self.gold) {
                Ok(r) => scores.push(r.kappa),
                Err(e) => {
                    self.warnings.push(format!("{model} {condition}: {e}"));
                    return None;
                }
            }
        }
        Some(mean(&scores))
    }

    fn axis_table<T: Copy + std::fmt::Display>(
        &mut self,
        title: &str,
        axis_name: &str,
        values: &[T],
        condition_for: impl Fn(T) -> Condition,
        fixed: &str,
    ) -> Table {
        let mut rows = Vec::new();
        for value in values {
            let condition = condition_for(*value);
            let models = self.models.clone();
            let cells: Vec<Option<f64>> = models.iter().map(|m| self.mean_kappa(m, condition)).collect();
            if cells.iter().all(Option::is_none) {
                self.warnings.push(format!("{title}: no data for {condition}, row omitted"));
                continue;
            }
            for (m, c) in models.iter().zip(&cells) {
                if c.is_none() {
                    self.warnings.push(format!("{title}: no data for {m} at {condition}"));
                }
            }
            rows.push(TableRow {
                keys: vec![value.to_string()],
                cells,
            });
        }
        Table {
            title: title.to_string(),
            note: format!("Cohen's kappa against consensus gold; {fixed}; mean over runs."),
            key_columns: vec![axis_name.to_string()],
            value_columns: self.models.clone(),
            rows,
        }
    }
}

/// Builds the requested report sections from a run store.
pub fn build_reports(
    store: &RunStore,
    gold: &AnnotationSet,
    codebook: &Codebook,
    options: &ReportOptions,
) -> Result<ReportBundle, ReportError> {
    let eval_gold = store.evaluation_gold(gold);
    if eval_gold.is_empty() {
        return Err(ReportError::EmptyGold);
    }
    let mut models: Vec<String> = store.manifest.models.iter().map(|m| m.model_id.clone()).collect();
    models.sort();
    let mut ctx = Ctx {
        store,
        gold: eval_gold,
        models,
        warnings: Vec::new(),
    };
    let reference = options.reference;
    let mut bundle = ReportBundle {
        manifest_hash: store.manifest.content_hash(),
        kappa_by_shot: None,
        kappa_by_length: None,
        kappa_by_context: None,
        consistency_table: None,
        performance_table: None,
        trace_matrix: None,
        domain_skeleton: None,
        domain_model_text: None,
        warnings: Vec::new(),
    };

    if options.wants(Section::KappaByShot) {
        bundle.kappa_by_shot = Some(ctx.axis_table(
            "Cohen's kappa by shot type",
            "setting",
            ShotType::ALL,
            |shot| Condition { shot, ..reference },
            &format!("length={}, context={}", reference.length, reference.context),
        ));
    }
    if options.wants(Section::KappaByLength) {
        bundle.kappa_by_length = Some(ctx.axis_table(
            "Cohen's kappa by prompt length",
            "length",
            PromptLength::ALL,
            |length| Condition { length, ..reference },
            &format!("shot={}, context={}", reference.shot, reference.context),
        ));
    }
    if options.wants(Section::KappaByContext) {
        bundle.kappa_by_context = Some(ctx.axis_table(
            "Cohen's kappa by context level",
            "context",
            ContextLevel::ALL,
            |context| Condition { context, ..reference },
            &format!("shot={}, length={}", reference.shot, reference.length),
        ));
    }

    if options.wants(Section::Consistency) {
        let mut sd = Vec::new();
        let mut icc = Vec::new();
        for model in ctx.models.clone() {
            match consistency_analysis(store, &model, reference, gold, options.run_score) {
                Ok(r) => {
                    sd.push(Some(r.sd));
                    icc.push(Some(r.icc));
                }
                Err(e) => {
                    ctx.warnings.push(format!("consistency: {model} {reference}: {e}"));
                    sd.push(None);
                    icc.push(None);
                }
            }
        }
        let score = match options.run_score {
            RunScore::Kappa => "per-run Cohen's kappa",
            RunScore::Accuracy => "per-run accuracy",
        };
        bundle.consistency_table = Some(Table {
            title: "Consistency across repeated runs".into(),
            note: format!(
                "SD = sample standard deviation of {score}; ICC = ICC(2,k) over per-item correctness; condition {reference}."
            ),
            key_columns: vec!["metric".into()],
            value_columns: ctx.models.clone(),
            rows: vec![
                TableRow {
                    keys: vec!["SD".into()],
                    cells: sd,
                },
                TableRow {
                    keys: vec!["ICC".into()],
                    cells: icc,
                },
            ],
        });
    }

    if options.wants(Section::Performance) {
        let mut rows = Vec::new();
        for shot in ShotType::ALL {
            let condition = Condition { shot: *shot, ..reference };
            for model in ctx.models.clone() {
                let Some(runs) = ctx.runs(&model, condition) else {
                    ctx.warnings.push(format!("performance: no data for {model} at {condition}"));
                    continue;
                };
                let mut acc = Vec::new();
                let (mut p, mut r, mut f1, mut err) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                let mut failed = None;
                for (pred, errors) in &runs {
                    match classification_report(pred, &ctx.gold, codebook) {
                        Ok(rep) => {
                            acc.push(rep.accuracy);
                            p.push(rep.macro_precision);
                            r.push(rep.macro_recall);
                            f1.push(rep.macro_f1);
                            err.push(*errors as f64 / ctx.gold.len() as f64);
                        }
                        Err(e) => failed = Some(e),
                    }
                }
                if let Some(e) = failed {
                    ctx.warnings.push(format!("performance: {model} {condition}: {e}"));
                    continue;
                }
                rows.push(TableRow {
                    keys: vec![shot.to_string(), model.clone()],
                    cells: vec![Some(mean(&acc)), Some(mean(&p)), Some(mean(&r)), Some(mean(&f1)), Some(mean(&err))],
                });
            }
        }
        bundle.performance_table = Some(Table {
            title: "Classification performance against consensus gold".into(),
            note: format!(
                "Macro-averaged over gold classes (unweighted); out-of-codebook and failed predictions count as misses; length={}, context={}; mean over runs.",
                reference.length, reference.context
            ),
            key_columns: vec!["setting".into(), "model".into()],
            value_columns: ["accuracy", "precision", "recall", "f1", "error_rate"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows,
        });
    }

    if options.wants(Section::Trace) {
        bundle.trace_matrix = Some(trace_matrix(store, codebook));
    }

    if options.wants(Section::Domain) {
        let model = options.domain_model.clone().or_else(|| ctx.models.first().cloned());
        let source = model.as_deref().and_then(|m| {
            store
                .annotations_for(m, reference, 0)
                .ok()
                .map(|s| s.annotations)
        });
        let annotations = match source {
            Some(a) if !a.is_empty() => a,
            _ => {
                ctx.warnings.push(format!(
                    "domain model: no labels for {} at {reference} run 0, using consensus gold",
                    model.as_deref().unwrap_or("<none>")
                ));
                gold.clone()
            }
        };
        let (text, classes) = domain_skeleton(&annotations, codebook);
        bundle.domain_model_text = Some(text);
        bundle.domain_skeleton = Some(classes);
    }

    bundle.warnings = ctx.warnings;
    Ok(bundle)
}

/// Groups every (model, condition, run) slice by label.
pub fn trace_matrix(store: &RunStore, codebook: &Codebook) -> Vec<TraceRow> {
    let mut groups: BTreeMap<(String, Condition, usize, String), BTreeSet<String>> = BTreeMap::new();
    for r in &store.records {
        let label = match (&r.error, &r.normalized_label) {
            (None, Some(l)) => l.clone(),
            _ => ERROR_LABEL.to_string(),
        };
        groups
            .entry((r.model_id.clone(), r.condition, r.run_index, label))
            .or_default()
            .insert(r.requirement_id.clone());
    }
    groups
        .into_iter()
        .map(|((model_id, condition, run_index, label), ids)| TraceRow {
            matched_codebook: codebook.contains(&label),
            model_id,
            condition,
            run_index,
            label,
            requirement_ids: ids.into_iter().collect(),
        })
        .collect()
}

pub fn trace_matrix_csv(rows: &[TraceRow], manifest_hash: &str) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "model_id",
            "shot",
            "length",
            "context",
            "run_index",
            "label",
            "matched_codebook",
            "requirement_count",
            "requirement_ids",
        ])
        .expect("in-memory write");
    for r in rows {
        writer
            .write_record([
                r.model_id.clone(),
                r.condition.shot.to_string(),
                r.condition.length.to_string(),
                r.condition.context.to_string(),
                r.run_index.to_string(),
                r.label.clone(),
                r.matched_codebook.to_string(),
                r.requirement_ids.len().to_string(),
                r.requirement_ids.join(";"),
            ])
            .expect("in-memory write");
    }
    let body = String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8");
    format!("# manifest_sha256={manifest_hash}\n{body}")
}

fn domain_skeleton(annotations: &AnnotationSet, codebook: &Codebook) -> (String, Vec<(String, usize)>) {
    let mut classes: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut unmapped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, label) in &annotations.entries {
        let target = if codebook.contains(label) { &mut classes } else { &mut unmapped };
        target.entry(label.as_str()).or_default().push(id.as_str());
    }
    let links: usize = classes.values().map(Vec::len).sum();
    let mut out = String::new();
    let _ = writeln!(out, "// domain model skeleton from {}", annotations.annotator);
    let _ = writeln!(out, "// {} classes, {} trace links", classes.len(), links);
    for (label, ids) in &classes {
        let _ = writeln!(out, "\nclass {label} {{");
        for id in ids {
            let _ = writeln!(out, "  // trace: {id}");
        }
        let _ = writeln!(out, "}}");
    }
    if !unmapped.is_empty() {
        let _ = writeln!(out, "\n// UNMAPPED");
        for (label, ids) in &unmapped {
            let _ = writeln!(out, "// label: {label}");
            for id in ids {
                let _ = writeln!(out, "//   trace: {id}");
            }
        }
    }
    let summary = classes.iter().map(|(l, ids)| (l.to_string(), ids.len())).collect();
    (out, summary)
}

/// One class stub per codebook label with `// trace:` lines for its
/// requirements; labels outside the codebook go to an UNMAPPED section.
pub fn export_domain_skeleton(annotations: &AnnotationSet, codebook: &Codebook) -> String {
    domain_skeleton(annotations, codebook).0
}

/// Writes the bundle's sections under `out_dir`, plus `warnings.log`.
pub fn write_reports(bundle: &ReportBundle, out_dir: &Path) -> Result<Vec<String>, ReportError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: &str| -> Result<(), ReportError> {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|source| ReportError::Io { path, source })?;
        written.push(name.to_string());
        Ok(())
    };
    let hash = &bundle.manifest_hash;
    for (stem, table) in [
        ("kappa_by_shot", &bundle.kappa_by_shot),
        ("kappa_by_length", &bundle.kappa_by_length),
        ("kappa_by_context", &bundle.kappa_by_context),
        ("consistency", &bundle.consistency_table),
        ("performance", &bundle.performance_table),
    ] {
        if let Some(t) = table {
            put(&format!("{stem}.csv"), &t.to_csv(hash))?;
            put(&format!("{stem}.md"), &t.to_markdown(hash))?;
        }
    }
    if let Some(rows) = &bundle.trace_matrix {
        put("trace_matrix.csv", &trace_matrix_csv(rows, hash))?;
    }
    if let Some(text) = &bundle.domain_model_text {
        put("domain_model.txt", text)?;
    }
    let mut log = bundle.warnings.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    put("warnings.log", &log)?;
    Ok(written)
}
