//! `bilora`: CLI for the adapter fine-tuning laboratory.
//!
//! Every failure path prints exactly one stderr line of the form
//! `<error-class>: <message>` and exits nonzero, so scripts can match on the
//! class without parsing prose.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bilora_core::config::{load_config, ExperimentConfig};
use bilora_core::diagnostics::ParamSpace;
use bilora_core::error::{Error, Result};
use bilora_core::harness;
use bilora_core::optim::Method;

#[derive(Parser)]
#[command(name = "bilora", version, about = "Low-rank adapter fine-tuning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply for any omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's run.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the optimization method (full-ft, lora, sam-full, lora-sam, bi-lora).
    #[arg(long)]
    method: Option<String>,
    /// Config override as key.path=value; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("run.seed={seed}"));
        }
        if let Some(method) = &self.method {
            overrides.push(format!("optim.method=\"{method}\""));
        }
        let cfg = match &self.config {
            Some(path) => load_config(path, &overrides)?,
            None => bilora_core::config::parse_config("", &overrides)?,
        };
        let out = self.out.clone().unwrap_or_else(|| cfg.run.output_dir.clone());
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the configured task's train/eval splits as CSV files.
    GenData(ConfigArgs),
    /// Full-parameter training of a fresh base model; saves base.ckpt.
    Pretrain(ConfigArgs),
    /// Run the configured method against a frozen base checkpoint.
    Finetune(ConfigArgs),
    /// Grid sweep over config overrides, aggregated into summary.csv.
    Sweep {
        /// Sweep spec (TOML): base_config, axes, seeds, cell_cap.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Median wall time per step for each method on one model and batch.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated methods to time.
        #[arg(long, default_value = "full-ft,lora,sam-full,lora-sam,bi-lora")]
        methods: String,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        measured: usize,
    },
    /// 1-D filter-normalized loss scan around a finished run's final model.
    Landscape {
        /// Finished run directory (with runlog.jsonl and full.ckpt).
        #[arg(long)]
        run: PathBuf,
        /// Parameter space: lora, full-excluding-lora or all.
        #[arg(long, default_value = "all")]
        space: String,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Grid points per side; the grid is symmetric around 0.
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Consolidated comparison across finished runs.
    Report {
        /// Finished run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Recompute sharpness at this perturbation radius.
        #[arg(long)]
        sharpness_rho: Option<f64>,
    },
}

fn parse_space(s: &str) -> Result<ParamSpace> {
    match s {
        "lora" => Ok(ParamSpace::LoraParams),
        "full-excluding-lora" => Ok(ParamSpace::FullParamsExcludingLora),
        "all" => Ok(ParamSpace::AllParams),
        other => Err(Error::Config(format!(
            "unknown space '{other}' (expected lora, full-excluding-lora or all)"
        ))),
    }
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .map(|m| match m.trim() {
            "full-ft" => Ok(Method::FullFt),
            "lora" => Ok(Method::Lora),
            "sam-full" => Ok(Method::SamFull),
            "lora-sam" => Ok(Method::LoraSam),
            "bi-lora" => Ok(Method::BiLora),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let (cfg, out) = args.load()?;
            let (train, eval) = harness::generate_dataset_files(&cfg, &out)?;
            println!("wrote {} and {}", train.display(), eval.display());
        }
        Command::Pretrain(args) => {
            let (cfg, out) = args.load()?;
            let path = harness::pretrain_to(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Finetune(args) => {
            let (cfg, out) = args.load()?;
            let art = harness::finetune_to(&cfg, &out)?;
            let metric = harness::final_eval_metric(&art.records).unwrap_or(f64::NAN);
            println!(
                "method={} steps={} final_eval_metric={metric:.4} out={}",
                cfg.optim.method.name(),
                cfg.run.steps,
                out.display()
            );
        }
        Command::Sweep { config, out } => {
            let spec = harness::load_sweep_spec(&config)?;
            let rows = harness::run_sweep(&spec, &out)?;
            for row in &rows {
                println!(
                    "{}: {:.4} +- {:.4} (n={})",
                    row.cell, row.mean_metric, row.stderr_metric, row.runs
                );
            }
            println!("wrote {}", out.join("summary.csv").display());
        }
        Command::Bench {
            config,
            methods,
            warmup,
            measured,
        } => {
            let (cfg, out) = config.load()?;
            let methods = parse_methods(&methods)?;
            let rows = harness::benchmark_step_time(&cfg, &methods, warmup, measured)?;
            std::fs::create_dir_all(&out)?;
            let csv_path = out.join("timing.csv");
            harness::write_timing_table(&rows, &csv_path)?;
            println!("{:<10} {:>12} {:>10} {:>10}", "method", "median_ms", "iqr_ms", "vs_lora");
            for r in &rows {
                println!(
                    "{:<10} {:>12.4} {:>10.4} {:>9.1}%",
                    r.method, r.median_ms, r.iqr_ms, r.relative_to_lora_pct
                );
            }
            println!("wrote {}", csv_path.display());
        }
        Command::Landscape {
            run,
            space,
            radius,
            points,
            repeats,
            seed,
            out,
        } => {
            let space = parse_space(&space)?;
            harness::landscape_from_run(&run, space, radius, points, repeats, seed, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Report {
            runs,
            out,
            sharpness_rho,
        } => {
            harness::compare_report(&runs, sharpness_rho, &out)?;
            let text = std::fs::read_to_string(out.join("report.txt"))?;
            print!("{text}");
            println!("wrote {}", out.join("report.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
