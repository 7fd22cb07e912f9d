//! End-to-end flow through the harness: pretrain, finetune with every
//! method, sweeps, landscape export and reports, all on a desk-size model.

use std::path::PathBuf;

use bilora_core::config::parse_config;
use bilora_core::diagnostics::ParamSpace;
use bilora_core::harness;
use bilora_core::optim::Method;
use bilora_core::runlog::{self, LogRecord};

fn small_config(method: &str, base_ckpt: Option<&PathBuf>, steps: u64) -> bilora_core::ExperimentConfig {
    let mut overrides = vec![
        format!("optim.method=\"{method}\""),
        format!("run.steps={steps}"),
        "task.train_size=64".to_string(),
        "task.eval_size=128".to_string(),
        "model.layer_dims=[2, 8, 8, 2]".to_string(),
        "model.rank=2".to_string(),
        "model.aux_rank=2".to_string(),
        "run.eval_every=10".to_string(),
        "run.snapshot_every=10".to_string(),
        "run.diag_every=10".to_string(),
    ];
    if let Some(p) = base_ckpt {
        overrides.push(format!("run.base_checkpoint=\"{}\"", p.display()));
    }
    parse_config("", &overrides).unwrap()
}

fn pretrain_once(dir: &std::path::Path) -> PathBuf {
    let mut cfg = small_config("full-ft", None, 60);
    cfg.task.label_noise = 0.0;
    harness::pretrain_to(&cfg, dir).unwrap()
}

#[test]
fn every_method_runs_and_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let base = pretrain_once(tmp.path());
    for method in ["full-ft", "lora", "sam-full", "lora-sam", "bi-lora"] {
        let cfg = small_config(method, Some(&base), 40);
        let out = tmp.path().join(method);
        let art = harness::finetune_to(&cfg, &out).unwrap();
        assert!(out.join("runlog.jsonl").exists());
        assert!(out.join("full.ckpt").exists());
        assert!(out.join("merged.ckpt").exists());
        let uses_adapters = matches!(method, "lora" | "lora-sam" | "bi-lora");
        assert_eq!(out.join("adapter.ckpt").exists(), uses_adapters);

        let steps = art
            .records
            .iter()
            .filter(|r| matches!(r, LogRecord::Step { .. }))
            .count();
        assert_eq!(steps, 40);
        let evals = art
            .records
            .iter()
            .filter(|r| matches!(r, LogRecord::Eval { .. }))
            .count();
        assert_eq!(evals, 4);
        runlog::validate_monotone_steps(&art.records).unwrap();

        if method == "lora-sam" {
            assert!(art.records.iter().any(|r| matches!(r, LogRecord::TermNorms(_))));
            assert!(art.records.iter().any(|r| matches!(r, LogRecord::Subspace(_))));
        }
        if method == "bi-lora" {
            assert!(art.records.iter().any(|r| matches!(r, LogRecord::Subspace(_))));
            assert!(art.records.iter().any(|r| matches!(r, LogRecord::Clip { .. })));
        }
        if uses_adapters {
            assert!(art.records.iter().any(|r| matches!(r, LogRecord::Trajectory(_))));
        }
        // merged model has no adapter state left
        assert!(art.merged.layers.iter().all(|l| l.adapted().is_none()));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let base = pretrain_once(tmp.path());
    let cfg = small_config("bi-lora", Some(&base), 30);
    harness::finetune_to(&cfg, &tmp.path().join("a")).unwrap();
    harness::finetune_to(&cfg, &tmp.path().join("b")).unwrap();
    for f in ["runlog.jsonl", "full.ckpt", "merged.ckpt", "adapter.ckpt"] {
        let x = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
}

#[test]
fn finetune_without_base_checkpoint_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config("lora", None, 10);
    let err = harness::finetune_to(&cfg, tmp.path()).unwrap_err();
    assert_eq!(err.class(), "config-error");
}

#[test]
fn pretrain_rejects_adapter_methods() {
    let cfg = small_config("lora", None, 10);
    let err = harness::run_pretrain(&cfg).unwrap_err();
    assert_eq!(err.class(), "config-error");
}

#[test]
fn sweep_aggregates_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let base = pretrain_once(tmp.path());
    let cfg_path = tmp.path().join("ft.toml");
    let cfg = small_config("lora", Some(&base), 15);
    std::fs::write(&cfg_path, toml::to_string(&cfg).unwrap()).unwrap();
    let spec_text = format!(
        "base_config = \"{}\"\nseeds = [1, 2]\n[axes]\n\"optim.eta1\" = [0.001, 0.003]\n",
        cfg_path.display()
    );
    let spec_path = tmp.path().join("sweep.toml");
    std::fs::write(&spec_path, &spec_text).unwrap();
    let spec = harness::load_sweep_spec(&spec_path).unwrap();
    let rows = harness::run_sweep(&spec, &tmp.path().join("sweep")).unwrap();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(row.runs, 2);
        assert!(row.mean_metric.is_finite());
    }
    assert!(tmp.path().join("sweep/summary.csv").exists());
    assert!(tmp.path().join("sweep/cell000-seed1/runlog.jsonl").exists());
}

#[test]
fn sweep_cell_cap_is_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("ft.toml");
    std::fs::write(&cfg_path, "").unwrap();
    let spec = harness::SweepSpec {
        base_config: cfg_path,
        axes: [("optim.rho".to_string(), vec![toml::Value::Float(0.1); 5])]
            .into_iter()
            .collect(),
        seeds: vec![1, 2, 3],
        cell_cap: 10,
    };
    let err = harness::run_sweep(&spec, tmp.path()).unwrap_err();
    assert_eq!(err.class(), "config-error");
}

#[test]
fn dataset_files_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config("lora", None, 1);
    let (train_path, eval_path) = harness::generate_dataset_files(&cfg, tmp.path()).unwrap();
    let train = bilora_core::data::read_csv(&train_path).unwrap();
    let eval = bilora_core::data::read_csv(&eval_path).unwrap();
    assert_eq!(train.len(), 64);
    assert_eq!(eval.len(), 128);
}

#[test]
fn landscape_export_has_grid_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let base = pretrain_once(tmp.path());
    let cfg = small_config("lora", Some(&base), 20);
    let run_dir = tmp.path().join("run");
    harness::finetune_to(&cfg, &run_dir).unwrap();
    let csv_path = tmp.path().join("scan.csv");
    let scan = harness::landscape_from_run(&run_dir, ParamSpace::LoraParams, 0.5, 4, 2, 7, &csv_path).unwrap();
    assert_eq!(scan.radii.len(), 9);
    assert_eq!(scan.losses.len(), 2);
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 9);
}

#[test]
fn report_covers_runs_and_rejects_mixed_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let base = pretrain_once(tmp.path());
    let lora_dir = tmp.path().join("lora");
    let bl_dir = tmp.path().join("bilora");
    harness::finetune_to(&small_config("lora", Some(&base), 20), &lora_dir).unwrap();
    harness::finetune_to(&small_config("bi-lora", Some(&base), 20), &bl_dir).unwrap();
    let out = tmp.path().join("report");
    let summaries =
        harness::compare_report(&[lora_dir.clone(), bl_dir.clone()], Some(0.05), &out).unwrap();
    assert_eq!(summaries.len(), 2);
    assert!(summaries.iter().any(|s| s.method == "lora"));
    assert!(summaries.iter().any(|s| s.method == "bi-lora"));
    assert!(summaries.iter().all(|s| s.sharpness_mean.is_some()));
    assert!(out.join("report.csv").exists());
    assert!(out.join("report.txt").exists());

    // same model, different task: must refuse
    let mut moons_cfg = small_config("lora", Some(&base), 20);
    moons_cfg.task.kind = bilora_core::TaskKind::TwoMoons;
    let moons_dir = tmp.path().join("moons");
    harness::finetune_to(&moons_cfg, &moons_dir).unwrap();
    let err = harness::compare_report(&[lora_dir, moons_dir], None, &out).unwrap_err();
    assert_eq!(err.class(), "config-error");
}

#[test]
fn bench_requires_enough_samples_and_reports_relative_cost() {
    let cfg = small_config("lora", None, 1);
    let err = harness::benchmark_step_time(&cfg, &[Method::Lora], 1, 5).unwrap_err();
    assert_eq!(err.class(), "config-error");

    let rows = harness::benchmark_step_time(&cfg, &[Method::Lora, Method::BiLora], 3, 30).unwrap();
    assert_eq!(rows.len(), 2);
    let lora = rows.iter().find(|r| r.method == "lora").unwrap();
    assert!((lora.relative_to_lora_pct - 100.0).abs() < 1e-9);
    assert!(rows.iter().all(|r| r.median_ms > 0.0));
}
