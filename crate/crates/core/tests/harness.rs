mod common;

use std::fs;

use common::{has_provenance, small_config, snapshot};
use rare_core::experiment::{run, ClickerKind, Command, ExperimentConfig, Provenance};
use rare_core::Error;
use serde_json::Value;

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_output_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = small_config(ClickerKind::GbdtC, &data);
    let out = run(Command::GenData, cfg.clone()).unwrap();
    assert_eq!(out.summary["pages"]["test"], 9);

    let mut from_csv = small_config(ClickerKind::GbdtC, &dir.path().join("clicker"));
    from_csv.data.csv_dir = Some(data.clone());
    let a = run(Command::TrainClicker, from_csv).unwrap();
    let b = run(Command::TrainClicker, small_config(ClickerKind::GbdtC, &dir.path().join("direct"))).unwrap();
    assert_eq!(a.summary, b.summary);
}

#[test]
fn eval_clicker_reports_auc_and_gauc() {
    let dir = tempfile::tempdir().unwrap();
    let train = small_config(ClickerKind::GbdtC, &dir.path().join("t"));
    run(Command::TrainClicker, train).unwrap();
    let mut eval = small_config(ClickerKind::GbdtC, &dir.path().join("e"));
    eval.inputs.clicker = Some(dir.path().join("t/clicker.json"));
    let out = run(Command::EvalClicker, eval).unwrap();
    assert!(out.summary["auc"].is_number() && out.summary["gauc"].is_number());
    let csv = fs::read_to_string(dir.path().join("e/metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("query_id,auc,gauc")));
    assert_eq!(
        read_json(&dir.path().join("e/report.json"))["gauc"],
        read_json(&dir.path().join("t/report.json"))["gauc"]
    );
}

#[test]
fn train_reranker_refuses_a_mismatched_clicker() {
    let dir = tempfile::tempdir().unwrap();
    run(Command::TrainClicker, small_config(ClickerKind::Ctrv, &dir.path().join("c"))).unwrap();
    let mut cfg = small_config(ClickerKind::GbdtC, &dir.path().join("r"));
    cfg.inputs.clicker = Some(dir.path().join("c/clicker.json"));
    let err = run(Command::TrainReranker, cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.is_usage());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(ClickerKind::GbdtC, dir.path());
    cfg.inputs.clicker = Some(dir.path().join("nope.json"));
    let err = run(Command::EvalClicker, cfg).unwrap_err();
    assert!(matches!(err, Error::Io(_)), "{err}");
    assert!(!err.is_usage());
}

#[test]
fn identity_reranker_is_the_neutral_baseline() {
    let dir = tempfile::tempdir().unwrap();
    run(Command::TrainClicker, small_config(ClickerKind::GbdtC, &dir.path().join("c"))).unwrap();
    let mut cfg = small_config(ClickerKind::GbdtC, &dir.path().join("id"));
    cfg.inputs.clicker = Some(dir.path().join("c/clicker.json"));
    let out = run(Command::EvalReranker, cfg).unwrap();
    assert_eq!(out.summary["delta_revenue"], 1.0);
    assert_eq!(out.summary["difference_nats"], 0.0);
    assert_eq!(out.summary["ndcg"], 1.0);
}

#[test]
fn trained_reranker_evaluates_like_training_reported() {
    let dir = tempfile::tempdir().unwrap();
    run(Command::TrainClicker, small_config(ClickerKind::GbdtC, &dir.path().join("c"))).unwrap();
    let mut cfg = small_config(ClickerKind::GbdtC, &dir.path().join("r"));
    cfg.inputs.clicker = Some(dir.path().join("c/clicker.json"));
    let trained = run(Command::TrainReranker, cfg.clone()).unwrap();
    cfg.out = dir.path().join("e");
    cfg.inputs.reranker = Some(dir.path().join("r/reranker.json"));
    let evaluated = run(Command::EvalReranker, cfg).unwrap();
    assert_eq!(trained.summary, evaluated.summary);
}

#[test]
fn one_point_grid_matches_direct_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(ClickerKind::GbdtC, &dir.path().join("g"));
    let g = cfg.clicker.gbdt.clone().unwrap();
    cfg.gbdt_grid.iterations = vec![g.iterations];
    cfg.gbdt_grid.learning_rate = vec![g.learning_rate];
    cfg.gbdt_grid.depth = vec![g.depth];
    let out = run(Command::GridSearch, cfg).unwrap();
    assert_eq!(out.summary["points"], 1);
    run(Command::TrainClicker, small_config(ClickerKind::GbdtC, &dir.path().join("t"))).unwrap();
    assert_eq!(
        read_json(&dir.path().join("g/clicker.json"))["model"],
        read_json(&dir.path().join("t/clicker.json"))["model"]
    );
}

#[test]
fn attention_grid_selects_by_validation_gauc() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(Command::GridSearch, small_config(ClickerKind::SaintQ, dir.path())).unwrap();
    assert_eq!(out.summary["points"], 2);
    let grid = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().filter(|l| l.ends_with("true")).count(), 1);
}

#[test]
fn alpha_sweep_over_four_clickers() {
    let dir = tempfile::tempdir().unwrap();
    let kinds = [ClickerKind::Ctrv, ClickerKind::GbdtC, ClickerKind::SaintS, ClickerKind::SaintQ];
    let mut paths = Vec::new();
    for k in kinds {
        let out = dir.path().join(k.as_str());
        run(Command::TrainClicker, small_config(k, &out)).unwrap();
        paths.push(out.join("clicker.json"));
    }
    let mut cfg = small_config(ClickerKind::GbdtC, &dir.path().join("sweep"));
    cfg.inputs.clickers = paths;
    cfg.sweep_seeds = vec![1];
    let out = run(Command::SweepAlpha, cfg).unwrap();
    let rows = out.summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 20);
    let corr = out.summary["correlations"].as_array().unwrap();
    assert_eq!(corr.len() * 2, 8);
    // correlations come straight from the listed rows
    for c in corr {
        let mine: Vec<&Value> = rows.iter().filter(|r| r["clicker"] == c["clicker"]).collect();
        let col = |k: &str| mine.iter().map(|r| r[k].as_f64().unwrap()).collect::<Vec<f64>>();
        let want = rare_core::metrics::pearson(&col("delta_revenue"), &col("ndcg")).ok();
        assert_eq!(c["revenue_vs_ndcg"].as_f64(), want);
    }
}

#[test]
fn sweep_k_and_bench_split_timing_from_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(Command::SweepK, small_config(ClickerKind::GbdtC, &dir.path().join("k"))).unwrap();
    assert_eq!(out.summary["rows"].as_array().unwrap().len(), 2);
    assert!(!fs::read_to_string(dir.path().join("k/sweep_k.csv")).unwrap().contains("ms"));
    let out = run(Command::BenchAttention, small_config(ClickerKind::SaintQ, &dir.path().join("b"))).unwrap();
    assert_eq!(out.summary["rows"].as_array().unwrap().len(), 2);
    let table = fs::read_to_string(dir.path().join("b/timing_bench_attention.csv")).unwrap();
    assert!(table.contains("ms_per_page"));
}

#[test]
fn every_artifact_names_its_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(ClickerKind::GbdtC, dir.path());
    let out = run(Command::TrainClicker, cfg.clone()).unwrap();
    let prov = Provenance::new("train-clicker", &cfg.resolve().unwrap()).unwrap();
    assert!(out.files.len() >= 4);
    for f in &out.files {
        assert!(has_provenance(&fs::read(f).unwrap(), &prov.config_sha256, 100), "{}", f.display());
    }
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(ClickerKind::SaintQ, dir.path());
    run(Command::TrainClicker, cfg.clone()).unwrap();
    let first = snapshot(dir.path());
    run(Command::TrainClicker, cfg).unwrap();
    assert_eq!(first, snapshot(dir.path()));
}

#[test]
fn config_file_and_overrides_resolve_identically() {
    let text = r#"{"seed": 5, "clicker": {"kind": "ctrv"}}"#;
    let a = ExperimentConfig::from_json_with_overrides(text, &[]).unwrap();
    let b = ExperimentConfig::from_json_with_overrides("{}", &[("seed".into(), "5".into()), ("clicker.kind".into(), "ctrv".into())]).unwrap();
    assert_eq!(a, b);
}
