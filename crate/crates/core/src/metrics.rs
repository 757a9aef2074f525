//! Agreement and consistency statistics.
//!
//! * Cohen's kappa between two single-label annotation sets over their shared
//!   items, label space = union of observed labels.
//! * Multi-class accuracy and macro precision/recall/F1 against consensus gold.
//! * Sample standard deviation of per-run scores and ICC(2,k) (two-way random
//!   effects, absolute agreement, average measures) over an items x runs
//!   matrix of correctness indicators.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotationSet, Codebook};
use crate::prompt::Condition;
use crate::runner::{RunStore, RunnerError};

/// Label recorded for an item whose completion failed. It never equals a gold
/// label, so failed items count as misses.
pub const ERROR_LABEL: &str = "<error>";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("annotation sets {0} and {1} share no requirement ids")]
    NoSharedItems(String, String),
    #[error("degenerate marginals: expected agreement is 1 but observed agreement is {0}")]
    DegenerateMarginals(f64),
    #[error("gold annotation set is empty")]
    EmptyGold,
    #[error("need at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("ICC needs at least 2 items and 2 runs, got {items}x{runs}")]
    MatrixTooSmall { items: usize, runs: usize },
    #[error("ICC matrix row {0} has a different number of runs")]
    RaggedMatrix(usize),
    #[error("degenerate ICC")]
    DegenerateIcc,
    #[error("consistency analysis needs at least 2 runs for {model_id} {condition}, found {found}")]
    TooFewRuns {
        model_id: String,
        condition: Condition,
        found: usize,
    },
    #[error(transparent)]
    Store(#[from] RunnerError),
}

/// Square count matrix over the sorted union of labels used by two raters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContingencyTable {
    pub label_space: Vec<String>,
    /// `counts[i][j]` = items rater A labelled `label_space[i]` and rater B
    /// labelled `label_space[j]`.
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn from_pairs<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str)> + Clone,
    {
        let label_space: Vec<String> = pairs
            .clone()
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect();
        let index: BTreeMap<&str, usize> =
            label_space.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let k = label_space.len();
        let mut counts = vec![vec![0u64; k]; k];
        let mut n = 0;
        for (a, b) in pairs {
            counts[index[a]][index[b]] += 1;
            n += 1;
        }
        ContingencyTable { label_space, counts, n }
    }

    /// Table over the ids both sets label.
    pub fn between(a: &AnnotationSet, b: &AnnotationSet) -> Result<Self, MetricsError> {
        let pairs: Vec<(&str, &str)> = a
            .entries
            .iter()
            .filter_map(|(id, la)| b.get(id).map(|lb| (la.as_str(), lb)))
            .collect();
        if pairs.is_empty() {
            return Err(MetricsError::NoSharedItems(a.annotator.clone(), b.annotator.clone()));
        }
        Ok(Self::from_pairs(pairs.iter().copied()))
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_totals(&self) -> Vec<u64> {
        (0..self.label_space.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.label_space.len()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub kappa: f64,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub n: u64,
}

pub fn kappa_from_table(table: &ContingencyTable) -> Result<AgreementResult, MetricsError> {
    let n = table.n as f64;
    let p_o = table.diagonal() as f64 / n;
    let chance: u64 = table
        .row_totals()
        .iter()
        .zip(table.column_totals())
        .map(|(r, c)| r * c)
        .sum();
    let p_e = chance as f64 / (n * n);
    let kappa = if table.n * table.n == chance {
        // both raters used one and the same label throughout
        if table.diagonal() == table.n {
            1.0
        } else {
            return Err(MetricsError::DegenerateMarginals(p_o));
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(AgreementResult {
        kappa,
        observed_agreement: p_o,
        expected_agreement: p_e,
        n: table.n,
    })
}

/// Cohen's kappa over the requirement ids shared by `a` and `b`.
pub fn cohen_kappa(a: &AnnotationSet, b: &AnnotationSet) -> Result<AgreementResult, MetricsError> {
    kappa_from_table(&ContingencyTable::between(a, b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Rows are gold labels, columns predicted labels.
    pub confusion: ContingencyTable,
    /// Predicted labels that are not codebook labels.
    pub out_of_codebook: Vec<String>,
    /// Gold items with no usable prediction.
    pub missing_predictions: usize,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores `pred` against gold over gold's ids. Missing predictions are scored
/// as [`ERROR_LABEL`]. Macro averages run over classes with gold support.
pub fn classification_report(
    pred: &AnnotationSet,
    gold: &AnnotationSet,
    codebook: &Codebook,
) -> Result<ClassificationReport, MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    let mut missing_predictions = 0;
    let pairs: Vec<(&str, &str)> = gold
        .entries
        .iter()
        .map(|(id, g)| {
            let p = pred.get(id).unwrap_or_else(|| {
                missing_predictions += 1;
                ERROR_LABEL
            });
            (g.as_str(), p)
        })
        .collect();
    let confusion = ContingencyTable::from_pairs(pairs.iter().copied());
    let support = confusion.row_totals();
    let predicted = confusion.column_totals();

    let mut per_class = BTreeMap::new();
    for (i, label) in confusion.label_space.iter().enumerate() {
        let tp = confusion.counts[i][i];
        let precision = ratio(tp, predicted[i]);
        let recall = ratio(tp, support[i]);
        per_class.insert(
            label.clone(),
            ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: support[i],
            },
        );
    }
    let gold_classes: Vec<&ClassMetrics> = per_class.values().filter(|m| m.support > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| gold_classes.iter().map(|m| f(m)).sum::<f64>() / gold_classes.len() as f64;

    let correct = confusion.diagonal();
    let accuracy = ratio(correct, confusion.n);
    let micro_precision = ratio(correct, predicted.iter().sum());
    let micro_recall = ratio(correct, support.iter().sum());
    assert!(
        (micro_precision - accuracy).abs() <= 1e-12 && (micro_recall - accuracy).abs() <= 1e-12,
        "single-label micro averages must equal accuracy"
    );

    Ok(ClassificationReport {
        accuracy,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        micro_precision,
        micro_recall,
        out_of_codebook: confusion
            .label_space
            .iter()
            .filter(|l| !codebook.contains(l))
            .cloned()
            .collect(),
        per_class,
        confusion,
        missing_predictions,
    })
}

/// Sample standard deviation (n - 1 denominator).
pub fn sd_across_runs(scores: &[f64]) -> Result<f64, MetricsError> {
    if scores.len() < 2 {
        return Err(MetricsError::TooFewScores(scores.len()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let ss: f64 = scores.iter().map(|s| (s - mean).powi(2)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// ICC(2,k) of an items x runs matrix.
///
/// A matrix whose runs are all identical (every row constant) is perfectly
/// reproducible and yields exactly 1.0, including the all-constant matrix.
pub fn icc_consistency(matrix: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let items = matrix.len();
    let runs = matrix.first().map_or(0, Vec::len);
    if items < 2 || runs < 2 {
        return Err(MetricsError::MatrixTooSmall { items, runs });
    }
    if let Some(bad) = matrix.iter().position(|row| row.len() != runs) {
        return Err(MetricsError::RaggedMatrix(bad));
    }
    if matrix.iter().all(|row| row.iter().all(|x| *x == row[0])) {
        return Ok(1.0);
    }

    let (n, k) = (items as f64, runs as f64);
    let row_means: Vec<f64> = matrix.iter().map(|r| r.iter().sum::<f64>() / k).collect();
    let col_means: Vec<f64> = (0..runs)
        .map(|j| matrix.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let grand = row_means.iter().sum::<f64>() / n;

    let ss_rows = k * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = n * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_err: f64 = matrix
        .iter()
        .zip(&row_means)
        .flat_map(|(row, rm)| {
            row.iter()
                .zip(&col_means)
                .map(move |(x, cm)| (x - rm - cm + grand).powi(2))
        })
        .sum();

    let ms_rows = ss_rows / (n - 1.0);
    let ms_cols = ss_cols / (k - 1.0);
    let ms_err = ss_err / ((n - 1.0) * (k - 1.0));
    let denominator = ms_rows + (ms_cols - ms_err) / n;
    if denominator.abs() <= 1e-12 {
        return Err(MetricsError::DegenerateIcc);
    }
    Ok((ms_rows - ms_err) / denominator)
}

/// Per-run score fed into the SD column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunScore {
    #[default]
    Kappa,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyResult {
    pub sd: f64,
    pub icc: f64,
    pub n_runs: usize,
    pub per_run_scores: Vec<f64>,
}

/// Predictions for every gold id, failed or missing items as [`ERROR_LABEL`].
pub fn complete_predictions(pred: &AnnotationSet, gold: &AnnotationSet) -> AnnotationSet {
    AnnotationSet {
        annotator: pred.annotator.clone(),
        kind: pred.kind,
        entries: gold
            .entries
            .keys()
            .map(|id| (id.clone(), pred.get(id).unwrap_or(ERROR_LABEL).to_string()))
            .collect(),
    }
}

/// Run-to-run variability of one (model, condition) slice against gold.
pub fn consistency_analysis(
    store: &RunStore,
    model_id: &str,
    condition: Condition,
    gold: &AnnotationSet,
    score: RunScore,
) -> Result<ConsistencyResult, MetricsError> {
    let gold = store.evaluation_gold(gold);
    if gold.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    let runs = store.run_indexes(model_id, condition);
    if runs.len() < 2 {
        return Err(MetricsError::TooFewRuns {
            model_id: model_id.to_string(),
            condition,
            found: runs.len(),
        });
    }
    let mut per_run_scores = Vec::with_capacity(runs.len());
    let mut columns = Vec::with_capacity(runs.len());
    for run in &runs {
        let slice = store.annotations_for(model_id, condition, *run)?;
        let pred = complete_predictions(&slice.annotations, &gold);
        per_run_scores.push(match score {
            RunScore::Kappa => cohen_kappa(&pred, &gold)?.kappa,
            RunScore::Accuracy => {
                let hits = gold.entries.iter().filter(|(id, g)| pred.get(id) == Some(g.as_str())).count();
                hits as f64 / gold.len() as f64
            }
        });
        columns.push(
            gold.entries
                .iter()
                .map(|(id, g)| if pred.get(id) == Some(g.as_str()) { 1.0 } else { 0.0 })
                .collect::<Vec<f64>>(),
        );
    }
    let matrix: Vec<Vec<f64>> = (0..gold.len())
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect();
    Ok(ConsistencyResult {
        sd: sd_across_runs(&per_run_scores)?,
        icc: icc_consistency(&matrix)?,
        n_runs: runs.len(),
        per_run_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnnotationKind;

    fn set(name: &str, labels: &[&str]) -> AnnotationSet {
        AnnotationSet::from_pairs(
            name,
            AnnotationKind::Human,
            labels.iter().enumerate().map(|(i, l)| (format!("r{i:02}"), *l)),
        )
    }

    fn codebook() -> Codebook {
        Codebook {
            test_case: "library".into(),
            system_type: "Library Management".into(),
            labels: vec!["Catalog".into(), "Loan".into(), "Notification".into()],
            synonyms: Default::default(),
            system_description_brief: "b".into(),
            system_description_full: "f".into(),
        }
    }

    #[test]
    fn kappa_hand_case() {
        let a = set("A", &["Loan", "Loan", "Catalog", "Notification"]);
        let b = set("B", &["Loan", "Catalog", "Catalog", "Notification"]);
        let r = cohen_kappa(&a, &b).unwrap();
        assert_eq!(r.observed_agreement, 0.75);
        assert_eq!(r.expected_agreement, 0.3125);
        assert!((r.kappa - 0.6364).abs() < 1e-4, "{}", r.kappa);
        assert_eq!(r.n, 4);
    }

    #[test]
    fn kappa_identity_and_single_label() {
        let a = set("A", &["Loan", "Catalog", "Loan"]);
        assert_eq!(cohen_kappa(&a, &a).unwrap().kappa, 1.0);
        let one = set("A", &["Loan", "Loan"]);
        let r = cohen_kappa(&one, &one).unwrap();
        assert_eq!((r.kappa, r.expected_agreement), (1.0, 1.0));
    }

    #[test]
    fn kappa_only_counts_shared_ids() {
        let a = set("A", &["Loan", "Catalog", "Loan"]);
        let mut b = set("B", &["Loan", "Catalog"]);
        b.entries.insert("zz".into(), "Loan".into());
        assert_eq!(cohen_kappa(&a, &b).unwrap().n, 2);
        let c = AnnotationSet::from_pairs("C", AnnotationKind::Human, [("x", "Loan")]);
        assert!(matches!(cohen_kappa(&a, &c), Err(MetricsError::NoSharedItems(..))));
    }

    #[test]
    fn contingency_layout() {
        let a = set("A", &["Loan", "Loan", "Catalog"]);
        let b = set("B", &["Loan", "Catalog", "Catalog"]);
        let t = ContingencyTable::between(&a, &b).unwrap();
        assert_eq!(t.label_space, ["Catalog", "Loan"]);
        assert_eq!(t.counts, vec![vec![1, 0], vec![1, 1]]);
        assert_eq!(t.n, 3);
    }

    #[test]
    fn report_hand_case() {
        let gold = set("gold", &["Loan", "Loan", "Catalog"]);
        let pred = set("pred", &["Loan", "Catalog", "Catalog"]);
        let r = classification_report(&pred, &gold, &codebook()).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        let loan = r.per_class["Loan"];
        assert_eq!((loan.precision, loan.recall), (1.0, 0.5));
        assert!((loan.f1 - 2.0 / 3.0).abs() < 1e-12);
        let cat = r.per_class["Catalog"];
        assert_eq!((cat.precision, cat.recall), (0.5, 1.0));
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_perfect_and_out_of_codebook() {
        let gold = set("gold", &["Loan", "Catalog", "Notification"]);
        let r = classification_report(&gold, &gold, &codebook()).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));

        let pred = set("pred", &["Loan", "accesscontrol", "Notification"]);
        let r = classification_report(&pred, &gold, &codebook()).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.out_of_codebook, ["accesscontrol"]);
        assert_eq!(r.confusion.label_space.len(), 4);
        assert_eq!(r.per_class["accesscontrol"].support, 0);
        // macro averages ignore the predicted-only column
        assert!((r.macro_recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class["Catalog"].recall, 0.0);
    }

    #[test]
    fn report_missing_predictions_are_misses() {
        let gold = set("gold", &["Loan", "Catalog"]);
        let pred = AnnotationSet::from_pairs("p", AnnotationKind::Model, [("r00", "Loan")]);
        let r = classification_report(&pred, &gold, &codebook()).unwrap();
        assert_eq!(r.missing_predictions, 1);
        assert_eq!(r.accuracy, 0.5);
        assert!(r.out_of_codebook.contains(&ERROR_LABEL.to_string()));
        let empty = AnnotationSet::new("g", AnnotationKind::Consensus);
        assert!(matches!(classification_report(&pred, &empty, &codebook()), Err(MetricsError::EmptyGold)));
    }

    #[test]
    fn sd_examples() {
        assert!((sd_across_runs(&[0.70, 0.72, 0.74]).unwrap() - 0.02).abs() < 1e-12);
        assert_eq!(sd_across_runs(&[0.5, 0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert!(matches!(sd_across_runs(&[0.5]), Err(MetricsError::TooFewScores(1))));
    }

    #[test]
    fn icc_policy_cases() {
        let col = [1.0, 1.0, 0.0, 1.0];
        let identical: Vec<Vec<f64>> = col.iter().map(|x| vec![*x; 3]).collect();
        assert_eq!(icc_consistency(&identical).unwrap(), 1.0);
        assert_eq!(icc_consistency(&vec![vec![1.0; 3]; 4]).unwrap(), 1.0);
        assert!(matches!(icc_consistency(&[vec![1.0, 0.0]]), Err(MetricsError::MatrixTooSmall { .. })));
        assert!(matches!(
            icc_consistency(&[vec![1.0, 0.0], vec![1.0]]),
            Err(MetricsError::RaggedMatrix(1))
        ));
    }

    #[test]
    fn icc_one_flipped_cell() {
        // items [1,1,0,1] over 3 runs, run 2 flips item 0.
        // Frozen from an ANOVA hand computation:
        // SSR = 2, SSC = 1/6, SSE = 1/2 -> MSR = 2/3, MSC = MSE = 1/12
        // ICC(2,k) = (2/3 - 1/12) / (2/3 + 0) = 7/8
        let m = vec![
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0],
        ];
        let icc = icc_consistency(&m).unwrap();
        assert!((icc - 7.0 / 8.0).abs() < 1e-12, "{icc}");
    }

    #[test]
    fn icc_rows_identical_columns_differ() {
        // every item identical, runs differ: no item variance to explain
        let m = vec![vec![1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0]];
        assert_eq!(icc_consistency(&m).unwrap(), 0.0);
    }
}
