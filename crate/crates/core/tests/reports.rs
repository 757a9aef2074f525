mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{e2e_config, fixture};
use reqqda::cli::{cmd_run, load_inputs, AppConfig, GridArgs};
use reqqda::metrics::{classification_report, cohen_kappa, complete_predictions};
use reqqda::prompt::{Condition, ContextLevel, PromptLength, ShotType};
use reqqda::report::{build_reports, ReportOptions, Section};
use reqqda::runner::{RunOptions, RunStore};

fn store_with(grid: GridArgs, n_runs: usize) -> (tempfile::TempDir, AppConfig, RunStore) {
    let dir = tempfile::tempdir().unwrap();
    let config = AppConfig::load(&e2e_config(dir.path(), &fixture("e2e/mock.toml"), n_runs, "")).unwrap();
    cmd_run(&config, &grid, &config.store_dir(), RunOptions::default()).unwrap();
    let store = RunStore::load(&config.store_dir()).unwrap();
    (dir, config, store)
}

#[test]
fn missing_condition_drops_row_with_one_warning() {
    let grid = GridArgs {
        shots: vec!["one".into(), "few".into()],
        ..GridArgs::default()
    };
    let (_dir, config, store) = store_with(grid, 1);
    let inputs = load_inputs(&config).unwrap();
    let options = ReportOptions {
        sections: Some(BTreeSet::from([Section::KappaByShot])),
        ..ReportOptions::default()
    };
    let bundle = build_reports(&store, &inputs.gold, &inputs.codebook, &options).unwrap();
    let table = bundle.kappa_by_shot.unwrap();
    let rows: Vec<&str> = table.rows.iter().map(|r| r.keys[0].as_str()).collect();
    assert_eq!(rows, ["one", "few"]);
    assert_eq!(bundle.warnings.len(), 1, "{:?}", bundle.warnings);
    assert!(bundle.warnings[0].contains("zero/long/full"));
    assert!(bundle.kappa_by_length.is_none());
}

#[test]
fn cells_equal_metrics_output() {
    let (_dir, config, store) = store_with(GridArgs::default(), 1);
    let inputs = load_inputs(&config).unwrap();
    let bundle = build_reports(&store, &inputs.gold, &inputs.codebook, &ReportOptions::default()).unwrap();
    let gold = store.evaluation_gold(&inputs.gold);
    for shot in ShotType::ALL {
        let condition = Condition::new(*shot, PromptLength::Long, ContextLevel::Full);
        let pred = complete_predictions(&store.annotations_for("mock-a", condition, 0).unwrap().annotations, &gold);
        let kappa = cohen_kappa(&pred, &gold).unwrap().kappa;
        let cell = bundle.kappa_by_shot.as_ref().unwrap().cell(&[shot.as_str()], "mock-a");
        assert_eq!(cell, Some(kappa));
        let report = classification_report(&pred, &gold, &inputs.codebook).unwrap();
        let perf = bundle.performance_table.as_ref().unwrap();
        assert_eq!(perf.cell(&[shot.as_str(), "mock-a"], "accuracy"), Some(report.accuracy));
        assert_eq!(perf.cell(&[shot.as_str(), "mock-a"], "f1"), Some(report.macro_f1));
    }
    let csv = bundle.kappa_by_shot.as_ref().unwrap().to_csv(&bundle.manifest_hash);
    assert!(csv.starts_with(&format!("# manifest_sha256={}\n", store.manifest.content_hash())));
}

#[test]
fn trace_matrix_places_each_requirement_once_per_slice() {
    let (_dir, config, store) = store_with(GridArgs::default(), 2);
    let inputs = load_inputs(&config).unwrap();
    let bundle = build_reports(&store, &inputs.gold, &inputs.codebook, &ReportOptions::default()).unwrap();
    let eval = store.evaluation_ids();
    let mut seen: BTreeMap<(String, Condition, usize), Vec<String>> = BTreeMap::new();
    for row in bundle.trace_matrix.unwrap() {
        seen.entry((row.model_id, row.condition, row.run_index))
            .or_default()
            .extend(row.requirement_ids);
    }
    assert_eq!(seen.len(), 27 * 2);
    for ids in seen.values() {
        let unique: BTreeSet<String> = ids.iter().cloned().collect();
        assert_eq!(unique.len(), ids.len());
        assert_eq!(unique, eval);
    }
}

#[test]
fn domain_skeleton_from_first_model_reference_run() {
    let (_dir, config, store) = store_with(GridArgs::default(), 1);
    let inputs = load_inputs(&config).unwrap();
    let bundle = build_reports(&store, &inputs.gold, &inputs.codebook, &ReportOptions::default()).unwrap();
    let text = bundle.domain_model_text.unwrap();
    assert!(text.starts_with("// domain model skeleton from mock-a|few/long/full|run0\n"));
    let links: usize = bundle.domain_skeleton.unwrap().iter().map(|(_, n)| n).sum();
    assert_eq!(links, store.evaluation_ids().len());
    assert_eq!(text.matches("// trace: ").count(), links);
}
