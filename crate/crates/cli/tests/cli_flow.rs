//! Black-box tests of the `bilora` binary: full pipeline, override flags,
//! and the single-line error contract.

use std::path::Path;
use std::process::{Command, Output};

fn bilora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilora"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_small_config(path: &Path, base: Option<&Path>) {
    let mut text = String::from(
        "[task]\ntrain_size = 64\neval_size = 128\n\n\
         [model]\nlayer_dims = [2, 8, 8, 2]\nrank = 2\naux_rank = 2\n\n\
         [run]\nsteps = 30\neval_every = 10\nsnapshot_every = 10\ndiag_every = 10\n",
    );
    if let Some(b) = base {
        text.push_str(&format!("base_checkpoint = \"{}\"\n", b.display()));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn pipeline_pretrain_finetune_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    write_small_config(&cfg, None);

    let pre_dir = tmp.path().join("pre");
    let out = bilora(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "full-ft",
        "--out",
        pre_dir.to_str().unwrap(),
        "--override",
        "task.label_noise=0.0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let base = pre_dir.join("base.ckpt");
    assert!(base.exists());

    let ft_cfg = tmp.path().join("ft.toml");
    write_small_config(&ft_cfg, Some(&base));
    let run_dir = tmp.path().join("run");
    let out = bilora(&[
        "finetune",
        "--config",
        ft_cfg.to_str().unwrap(),
        "--method",
        "bi-lora",
        "--seed",
        "7",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("method=bi-lora"));
    assert!(run_dir.join("runlog.jsonl").exists());
    assert!(run_dir.join("merged.ckpt").exists());

    let report_dir = tmp.path().join("report");
    let out = bilora(&[
        "report",
        run_dir.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report_dir.join("report.csv").exists());

    let scan_csv = tmp.path().join("scan.csv");
    let out = bilora(&[
        "landscape",
        "--run",
        run_dir.to_str().unwrap(),
        "--space",
        "lora",
        "--radius",
        "0.5",
        "--points",
        "3",
        "--repeats",
        "1",
        "--out",
        scan_csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(scan_csv.exists());
}

#[test]
fn gen_data_writes_csv_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("data");
    let out = bilora(&[
        "gen-data",
        "--out",
        out_dir.to_str().unwrap(),
        "--override",
        "task.train_size=16",
        "--override",
        "task.eval_size=16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("train.csv").exists());
    assert!(out_dir.join("eval.csv").exists());
}

#[test]
fn errors_are_single_line_with_class_prefix() {
    let tmp = tempfile::tempdir().unwrap();
    // finetune without a base checkpoint: config-error
    let out = bilora(&["finetune", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.starts_with("config-error: "), "stderr: {stderr}");

    // unknown config key
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[optim]\nlearning_rate = 1.0\n").unwrap();
    let out = bilora(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("config-error: "));

    // missing checkpoint file
    let ft = tmp.path().join("ft.toml");
    std::fs::write(
        &ft,
        "[run]\nbase_checkpoint = \"/nonexistent/base.ckpt\"\n",
    )
    .unwrap();
    let out = bilora(&["finetune", "--config", ft.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1);
    let class = stderr.split(':').next().unwrap();
    assert!(
        ["io-error", "checkpoint-error"].contains(&class),
        "stderr: {stderr}"
    );
}

#[test]
fn seed_flag_changes_the_run_and_same_seed_reproduces_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    write_small_config(&cfg, None);
    let pre = tmp.path().join("pre");
    let out = bilora(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "full-ft",
        "--out",
        pre.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let ft_cfg = tmp.path().join("ft.toml");
    write_small_config(&ft_cfg, Some(&pre.join("base.ckpt")));
    let run = |seed: &str, dir: &str| {
        let out = bilora(&[
            "finetune",
            "--config",
            ft_cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            tmp.path().join(dir).to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(tmp.path().join(dir).join("runlog.jsonl")).unwrap()
    };
    let a = run("3", "a");
    let b = run("3", "b");
    let c = run("4", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}
