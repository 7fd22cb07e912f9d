//! Experiment harness: dataset synthesis, the pretrain-then-finetune
//! protocol, sweeps, step-time benchmarks, landscape exports and run
//! reports. The CLI is a thin wrapper over this module so the acceptance
//! suite can drive everything in-process.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{attach_adapters, merge_for_inference};
use crate::checkpoint;
use crate::config::{apply_override, ExperimentConfig};
use crate::data::{self, Dataset, TaskKind};
use crate::diagnostics::{
    check_subspaces, estimate_sharpness, record_trajectory, scan_landscape_1d,
    LandscapeScan, ParamSnapshot, ParamSpace, SharpnessReport, SubspaceContext,
};
use crate::error::{Error, Result};
use crate::linalg::{seeded_gaussian, Matrix, RngStream};
use crate::net::{evaluate_loss, evaluate_metric, Batch, Network};
use crate::optim::{self, Method, OptimState};
use crate::runlog::{self, LogRecord, RunLogWriter};

/// Stream ids for the per-run RNG so every consumer draws independently.
mod streams {
    pub const BATCH: u64 = 10;
    pub const MODEL_INIT: u64 = 11;
    pub const ADAPTER_INIT: u64 = 12;
    pub const DIAG: u64 = 13;
}

const EVAL_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Train/eval datasets for a config. The eval split is drawn i.i.d. with
/// the train split (same task, same label-noise level, offset seed), so the
/// train/eval gap isolates overfitting instead of distribution shift.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.task.kind {
        TaskKind::CsvFile => {
            let train = cfg
                .task
                .train_path
                .as_ref()
                .ok_or_else(|| Error::Config("csv-file task requires task.train_path".into()))?;
            let eval = cfg
                .task
                .eval_path
                .as_ref()
                .ok_or_else(|| Error::Config("csv-file task requires task.eval_path".into()))?;
            Ok((data::read_csv(train)?, data::read_csv(eval)?))
        }
        ref kind => {
            let train = data::generate(kind, cfg.task.train_size, cfg.task.label_noise, cfg.run.seed)?;
            let eval = data::generate(
                kind,
                cfg.task.eval_size,
                cfg.task.label_noise,
                cfg.run.seed.wrapping_add(EVAL_SEED_OFFSET),
            )?;
            Ok((train, eval))
        }
    }
}

/// `gen-data`: write train/eval CSV files into `out`.
pub fn generate_dataset_files(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out)?;
    let (train, eval) = build_datasets(cfg)?;
    let train_path = out.join("train.csv");
    let eval_path = out.join("eval.csv");
    data::write_csv(&train, &train_path)?;
    data::write_csv(&eval, &eval_path)?;
    Ok((train_path, eval_path))
}

// ---------------------------------------------------------------------------
// pretrain

/// Full-parameter training of a fresh base network on the source task.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<Network> {
    cfg.validate()?;
    if cfg.optim.method.uses_adapters() {
        return Err(Error::Config(
            "pretrain wants a full-parameter method (full-ft or sam-full)".into(),
        ));
    }
    let (train, _) = build_datasets(cfg)?;
    let spec = {
        let mut s = cfg.model.to_spec()?;
        s.adapter_layers.clear();
        s
    };
    let mut rng = RngStream::new(cfg.run.seed, streams::MODEL_INIT);
    let mut net = Network::new(spec, &mut rng)?;
    let optim_cfg = cfg.optim.to_optim_config()?;
    let mut state = OptimState::new();
    let mut sampler = BatchSampler::new(train.len(), cfg.run.batch_size, cfg.run.seed);
    for k in 0..cfg.run.steps {
        state.lr_scale = cfg.optim.lr_scale(k, cfg.run.steps);
        let batch = train.batch_of(&sampler.next_indices());
        let report = optim::step(&mut net, &batch, &optim_cfg, &mut state)?;
        if !report.loss.is_finite() {
            return Err(Error::Diverged(format!("pretrain loss non-finite at step {k}")));
        }
    }
    Ok(net)
}

/// `pretrain`: run and save the base checkpoint to `out/base.ckpt`.
pub fn pretrain_to(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let net = run_pretrain(cfg)?;
    let path = out.join("base.ckpt");
    checkpoint::save_network(&net, &path)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// finetune

#[derive(Debug)]
pub struct FinetuneArtifacts {
    pub records: Vec<LogRecord>,
    pub final_net: Network,
    pub merged: Network,
    pub train: Dataset,
    pub eval: Dataset,
}

struct BatchSampler {
    perm: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: RngStream,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSampler {
            perm: (0..n).collect(),
            pos: n, // force an initial shuffle
            batch: batch.min(n),
            rng: RngStream::new(seed, streams::BATCH),
        }
    }

    fn next_indices(&mut self) -> Vec<usize> {
        use rand::seq::SliceRandom;
        if self.pos + self.batch > self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.perm[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Execute the configured method against a frozen base network, logging
/// step, eval, clip, diagnostic and trajectory records.
pub fn run_finetune(cfg: &ExperimentConfig, base: &Network, log_path: Option<&Path>) -> Result<FinetuneArtifacts> {
    cfg.validate()?;
    let (train, eval) = build_datasets(cfg)?;
    let optim_cfg = cfg.optim.to_optim_config()?;
    let method = optim_cfg.method;

    let mut net = base.clone();
    net.reset_backward_count();
    if method.uses_adapters() {
        let mut arng = RngStream::new(cfg.run.seed, streams::ADAPTER_INIT);
        let aux_rank = if method == Method::BiLora { cfg.model.aux_rank } else { 0 };
        attach_adapters(
            &mut net,
            &cfg.model.adapter_layers,
            cfg.model.rank,
            cfg.model.alpha,
            aux_rank,
            cfg.model.aux_alpha,
            &mut arng,
        )?;
    }
    if net.input_dim() != train.inputs.cols() {
        return Err(Error::Config(format!(
            "model input dim {} does not match dataset feature dim {}",
            net.input_dim(),
            train.inputs.cols()
        )));
    }
    let base_checksum = net.base_checksum();

    let mut writer = match log_path {
        Some(p) => RunLogWriter::create(p)?,
        None => RunLogWriter::in_memory(),
    };
    writer.append(LogRecord::Header {
        config: cfg.clone(),
        seed: cfg.run.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    })?;

    let train_batch = train.as_batch();
    let eval_batch = eval.as_batch();
    let mut sampler = BatchSampler::new(train.len(), cfg.run.batch_size, cfg.run.seed);
    let mut state = OptimState::new();
    let mut snapshots: Vec<ParamSnapshot> = Vec::new();
    let diag_on = cfg.run.diag_every > 0;

    for k in 0..cfg.run.steps {
        state.lr_scale = cfg.optim.lr_scale(k, cfg.run.steps);
        let batch = train.batch_of(&sampler.next_indices());

        let instrument_this_step =
            diag_on && method == Method::LoraSam && k % cfg.run.diag_every == 0;

        let report = if instrument_this_step {
            // capture the pre-step factors so the term-norm and subspace
            // records describe the perturbation actually applied
            let pre: Vec<(usize, Matrix, Matrix)> = net
                .layers
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.adapted().map(|a| (i, a.primary.b.clone(), a.primary.a.clone())))
                .collect();
            let (report, perts) =
                optim::lora_sam_step_instrumented(&mut net, &batch, &optim_cfg, &mut state)?;
            for p in &perts {
                let (b, a) = pre
                    .iter()
                    .find(|(i, _, _)| *i == p.layer)
                    .map(|(_, b, a)| (b, a))
                    .expect("perturbed layer was captured");
                let rec = crate::diagnostics::term_norms_from_perturbation(
                    k, p.layer, b, a, &p.eps_b, &p.eps_a,
                )?;
                writer.append(LogRecord::TermNorms(rec))?;
                let sub = check_subspaces(
                    k,
                    p.layer,
                    &SubspaceContext::LoraSam {
                        b,
                        a,
                        eps_b: &p.eps_b,
                        eps_a: &p.eps_a,
                    },
                )?;
                writer.append(LogRecord::Subspace(sub))?;
            }
            report
        } else {
            optim::step(&mut net, &batch, &optim_cfg, &mut state)?
        };

        if !report.loss.is_finite() {
            return Err(Error::Diverged(format!("loss non-finite at step {k}")));
        }

        writer.append(LogRecord::Step {
            step: k,
            loss: report.loss,
            grad_norm: report.grad_norm,
            perturbation_norm: report.perturbation_norm,
            skipped_perturbation: report.skipped_perturbation,
            backwards: report.backwards,
        })?;
        if let Some(clip) = report.clip {
            writer.append(LogRecord::Clip { step: k, report: clip })?;
        }
        if diag_on && method == Method::BiLora && k % cfg.run.diag_every == 0 {
            for (i, layer) in net.layers.iter().enumerate() {
                let Some(lora) = layer.adapted() else { continue };
                let Some(aux) = &lora.auxiliary else { continue };
                let sub = check_subspaces(
                    k,
                    i,
                    &SubspaceContext::BiLora {
                        b1: &lora.primary.b,
                        b2: &aux.b,
                        a2: &aux.a,
                        s2: aux.scaling(),
                    },
                )?;
                writer.append(LogRecord::Subspace(sub))?;
            }
        }
        if cfg.run.eval_every > 0 && (k + 1) % cfg.run.eval_every == 0 {
            writer.append(eval_record(k, &net, &train_batch, &eval_batch)?)?;
        }
        if method.uses_adapters() && cfg.run.snapshot_every > 0 && (k + 1) % cfg.run.snapshot_every == 0 {
            snapshots.push(ParamSnapshot::capture(k, &net));
        }
    }

    if cfg.run.steps > 0 && (cfg.run.eval_every == 0 || cfg.run.steps % cfg.run.eval_every != 0) {
        writer.append(eval_record(cfg.run.steps - 1, &net, &train_batch, &eval_batch)?)?;
    }

    if method != Method::FullFt && method != Method::SamFull && net.base_checksum() != base_checksum {
        return Err(Error::Contract("frozen base weights changed during fine-tuning".into()));
    }

    if snapshots.len() >= 2 {
        let final_snap = ParamSnapshot::capture(cfg.run.steps, &net);
        for rec in record_trajectory(&snapshots, &final_snap)? {
            writer.append(LogRecord::Trajectory(rec))?;
        }
    }

    let merged = merge_for_inference(&net)?;
    let records = writer.finish()?;
    runlog::validate_monotone_steps(&records)?;
    Ok(FinetuneArtifacts {
        records,
        final_net: net,
        merged,
        train,
        eval,
    })
}

// Eval records describe the deployable model, so the adversarial auxiliary
// is excluded, matching the inference-time merge.
fn eval_record(step: u64, net: &Network, train: &Batch, eval: &Batch) -> Result<LogRecord> {
    Ok(LogRecord::Eval {
        step,
        train_loss: evaluate_loss(net, train, false)?,
        eval_loss: evaluate_loss(net, eval, false)?,
        train_metric: evaluate_metric(net, train, false)?,
        eval_metric: evaluate_metric(net, eval, false)?,
    })
}

/// `finetune`: run against the configured base checkpoint and write the run
/// log plus the final, adapter and merged checkpoints into `out`.
pub fn finetune_to(cfg: &ExperimentConfig, out: &Path) -> Result<FinetuneArtifacts> {
    let base_path = cfg
        .run
        .base_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("finetune requires run.base_checkpoint".into()))?;
    let base = checkpoint::load_network(base_path)?;
    std::fs::create_dir_all(out)?;
    let artifacts = run_finetune(cfg, &base, Some(&out.join("runlog.jsonl")))?;
    checkpoint::save_network(&artifacts.final_net, &out.join("full.ckpt"))?;
    if cfg.optim.method.uses_adapters() {
        checkpoint::save_adapters(&artifacts.final_net, &out.join("adapter.ckpt"))?;
    }
    checkpoint::save_network(&artifacts.merged, &out.join("merged.ckpt"))?;
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Path to the base experiment config.
    pub base_config: PathBuf,
    /// Override axes: config path -> list of values (TOML-typed).
    pub axes: BTreeMap<String, Vec<toml::Value>>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_cell_cap")]
    pub cell_cap: usize,
}

fn default_cell_cap() -> usize {
    256
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub cell: String,
    pub runs: usize,
    pub mean_metric: f64,
    pub stderr_metric: f64,
}

pub fn load_sweep_spec(path: &Path) -> Result<SweepSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("invalid sweep spec: {e}")))
}

/// Run every cell x seed, retain per-cell run logs, and aggregate the final
/// eval metric into `summary.csv`. Cell failures are recorded and the sweep
/// continues.
pub fn run_sweep(spec: &SweepSpec, out: &Path) -> Result<Vec<SweepRow>> {
    let base_text = std::fs::read_to_string(&spec.base_config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec.base_config.display())))?;
    let axes: Vec<(&String, &Vec<toml::Value>)> = spec.axes.iter().collect();
    let mut cells: Vec<Vec<(String, toml::Value)>> = vec![vec![]];
    for (key, values) in &axes {
        let mut next = Vec::new();
        for cell in &cells {
            for v in *values {
                let mut c = cell.clone();
                c.push(((*key).clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    if cells.len() * spec.seeds.len() > spec.cell_cap {
        return Err(Error::Config(format!(
            "sweep would run {} cells x {} seeds, exceeding cell_cap {}",
            cells.len(),
            spec.seeds.len(),
            spec.cell_cap
        )));
    }
    std::fs::create_dir_all(out)?;

    let mut rows = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        let label = if cell.is_empty() {
            "base".to_string()
        } else {
            cell.iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut metrics = Vec::new();
        for &seed in &spec.seeds {
            let mut doc: toml::Value = base_text
                .parse()
                .map_err(|e| Error::Config(format!("base config: {e}")))?;
            for (k, v) in cell {
                set_path(&mut doc, k, v.clone())?;
            }
            set_path(&mut doc, "run.seed", toml::Value::Integer(seed as i64))?;
            let run_dir = out.join(format!("cell{ci:03}-seed{seed}"));
            let cfg: ExperimentConfig = match doc.clone().try_into() {
                Ok(c) => c,
                Err(e) => {
                    log::error!("cell {label} seed {seed}: invalid config: {e}");
                    continue;
                }
            };
            match finetune_to(&cfg, &run_dir) {
                Ok(art) => {
                    if let Some(m) = final_eval_metric(&art.records) {
                        metrics.push(m);
                    }
                }
                Err(e) => log::error!("cell {label} seed {seed} failed: {e}"),
            }
        }
        let n = metrics.len();
        let mean = if n > 0 { metrics.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let stderr = if n > 1 {
            let var = metrics.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        rows.push(SweepRow {
            cell: label,
            runs: n,
            mean_metric: mean,
            stderr_metric: stderr,
        });
    }

    let mut wtr = csv::Writer::from_path(out.join("summary.csv"))?;
    wtr.write_record(["cell", "runs", "mean_metric", "stderr_metric"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for row in &rows {
        wtr.write_record([
            row.cell.clone(),
            row.runs.to_string(),
            format!("{:?}", row.mean_metric),
            format!("{:?}", row.stderr_metric),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(rows)
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    // reuse the override machinery by rendering the value as TOML
    let rendered = match &value {
        toml::Value::String(s) => format!("{path}=\"{s}\""),
        other => format!("{path}={other}"),
    };
    apply_override(doc, &rendered)
}

/// Final eval metric of a run log.
pub fn final_eval_metric(records: &[LogRecord]) -> Option<f64> {
    records.iter().rev().find_map(|r| match r {
        LogRecord::Eval { eval_metric, .. } => Some(*eval_metric),
        _ => None,
    })
}

// ---------------------------------------------------------------------------
// step-time benchmark

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub method: String,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub relative_to_lora_pct: f64,
}

/// Median and interquartile wall time per optimization step for each method
/// on an identical model and batch. The clock brackets the step call only.
pub fn benchmark_step_time(
    cfg: &ExperimentConfig,
    methods: &[Method],
    warmup: usize,
    measured: usize,
) -> Result<Vec<TimingRow>> {
    if measured < 30 {
        return Err(Error::Config("bench needs measured-steps >= 30".into()));
    }
    let spec = {
        let mut s = cfg.model.to_spec()?;
        s.adapter_layers.clear();
        s
    };
    let mut rng = RngStream::new(cfg.run.seed, streams::MODEL_INIT);
    let base = Network::new(spec, &mut rng)?;

    // synthetic batch with the model's own feature dim
    let mut brng = RngStream::new(cfg.run.seed, streams::BATCH);
    let inputs = seeded_gaussian(cfg.run.batch_size, base.input_dim(), &mut brng, 1.0);
    let mut targets = Matrix::zeros(cfg.run.batch_size, base.output_dim());
    for i in 0..cfg.run.batch_size {
        use rand::Rng;
        let c = brng.gen_range(0..base.output_dim());
        targets.set(i, c, 1.0);
    }
    let batch = Batch::new(inputs, targets)?;

    let mut medians: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut rows_order: Vec<String> = Vec::new();
    for &method in methods {
        let mut net = base.clone();
        if method.uses_adapters() {
            let mut arng = RngStream::new(cfg.run.seed, streams::ADAPTER_INIT);
            let aux_rank = if method == Method::BiLora { cfg.model.aux_rank } else { 0 };
            attach_adapters(
                &mut net,
                &cfg.model.adapter_layers,
                cfg.model.rank,
                cfg.model.alpha,
                aux_rank,
                cfg.model.aux_alpha,
                &mut arng,
            )?;
        }
        let mut optim_cfg = cfg.optim.to_optim_config()?;
        optim_cfg.method = method;
        let mut state = OptimState::new();
        let mut samples = Vec::with_capacity(measured);
        for i in 0..warmup + measured {
            let t0 = Instant::now();
            optim::step(&mut net, &batch, &optim_cfg, &mut state)?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            if i >= warmup {
                samples.push(dt);
            }
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| samples[((samples.len() - 1) as f64 * p).round() as usize];
        medians.insert(method.name().to_string(), (q(0.5), q(0.75) - q(0.25)));
        rows_order.push(method.name().to_string());
    }

    let lora_median = medians.get("lora").map(|(m, _)| *m);
    Ok(rows_order
        .iter()
        .map(|name| {
            let (median, iqr) = medians[name];
            TimingRow {
                method: name.clone(),
                median_ms: median,
                iqr_ms: iqr,
                relative_to_lora_pct: match lora_median {
                    Some(l) if l > 0.0 => 100.0 * median / l,
                    _ => f64::NAN,
                },
            }
        })
        .collect())
}

pub fn write_timing_table(rows: &[TimingRow], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["method", "median_ms", "iqr_ms", "relative_to_lora_pct"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        wtr.write_record([
            r.method.clone(),
            format!("{:.4}", r.median_ms),
            format!("{:.4}", r.iqr_ms),
            format!("{:.1}", r.relative_to_lora_pct),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// landscape export

/// Scan the loss landscape of a finished run and export one row per
/// (repeat, radius).
pub fn landscape_from_run(
    run_dir: &Path,
    space: ParamSpace,
    radius_max: f64,
    n_points: usize,
    repeats: usize,
    seed: u64,
    out_csv: &Path,
) -> Result<LandscapeScan> {
    let records = runlog::read_runlog(&run_dir.join("runlog.jsonl"))?;
    let cfg = runlog::header_config(&records)
        .ok_or_else(|| Error::Data("run log has no header record".into()))?
        .clone();
    let mut net = checkpoint::load_network(&run_dir.join("full.ckpt"))?;
    let (train, _) = build_datasets(&cfg)?;
    let radii = symmetric_grid(radius_max, n_points);
    let scan = scan_landscape_1d(&mut net, &[train.as_batch()], space, seed, &radii, repeats)?;
    let mut wtr = csv::Writer::from_path(out_csv)?;
    wtr.write_record(["repeat", "radius", "loss"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for (rep, row) in scan.losses.iter().enumerate() {
        for (j, loss) in row.iter().enumerate() {
            wtr.write_record([rep.to_string(), format!("{:?}", scan.radii[j]), format!("{loss:?}")])
                .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    wtr.flush()?;
    Ok(scan)
}

/// Symmetric grid of `2 * half + 1` points over `[-radius, radius]`.
pub fn symmetric_grid(radius: f64, half: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * half + 1);
    for i in -(half as i64)..=(half as i64) {
        out.push(radius * i as f64 / half.max(1) as f64);
    }
    out
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub dir: String,
    pub method: String,
    pub seed: u64,
    pub final_eval_metric: f64,
    pub final_eval_loss: f64,
    pub late_loss_gap: f64,
    pub late_metric_gap: f64,
    pub clip_triggered: usize,
    pub sharpness_mean: Option<f64>,
}

/// Mean generalization gap over the last quarter of eval records.
pub fn late_phase_gaps(records: &[LogRecord]) -> Option<(f64, f64)> {
    let evals: Vec<(f64, f64, f64, f64)> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval {
                train_loss,
                eval_loss,
                train_metric,
                eval_metric,
                ..
            } => Some((*train_loss, *eval_loss, *train_metric, *eval_metric)),
            _ => None,
        })
        .collect();
    if evals.is_empty() {
        return None;
    }
    let start = evals.len() - evals.len().div_ceil(4);
    let late = &evals[start..];
    let n = late.len() as f64;
    let loss_gap = late.iter().map(|(tl, el, _, _)| el - tl).sum::<f64>() / n;
    let metric_gap = late.iter().map(|(_, _, tm, em)| tm - em).sum::<f64>() / n;
    Some((loss_gap, metric_gap))
}

/// Consolidated comparison across finished run directories. Refuses to mix
/// tasks. Sharpness is recomputed from each run's final checkpoint when
/// `sharpness_rho` is set.
pub fn compare_report(run_dirs: &[PathBuf], sharpness_rho: Option<f64>, out: &Path) -> Result<Vec<RunSummary>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut task_kind: Option<TaskKind> = None;
    let mut summaries = Vec::new();
    for dir in run_dirs {
        let records = runlog::read_runlog(&dir.join("runlog.jsonl"))?;
        let cfg = runlog::header_config(&records)
            .ok_or_else(|| Error::Data(format!("{}: run log has no header", dir.display())))?
            .clone();
        match &task_kind {
            None => task_kind = Some(cfg.task.kind.clone()),
            Some(k) if *k != cfg.task.kind => {
                return Err(Error::Config("refusing to compare runs of different tasks".into()))
            }
            _ => {}
        }
        let (final_eval_metric, final_eval_loss) = records
            .iter()
            .rev()
            .find_map(|r| match r {
                LogRecord::Eval { eval_metric, eval_loss, .. } => Some((*eval_metric, *eval_loss)),
                _ => None,
            })
            .unwrap_or((f64::NAN, f64::NAN));
        let (late_loss_gap, late_metric_gap) = late_phase_gaps(&records).unwrap_or((f64::NAN, f64::NAN));
        let clip_triggered = records
            .iter()
            .filter(|r| matches!(r, LogRecord::Clip { report, .. } if report.triggered))
            .count();
        let sharpness_mean = match sharpness_rho {
            Some(rho) => {
                // the merged checkpoint is the deployable model
                let mut net = checkpoint::load_network(&dir.join("merged.ckpt"))?;
                let (_, eval) = build_datasets(&cfg)?;
                let mut rng = RngStream::new(cfg.run.seed, streams::DIAG);
                let rep = estimate_sharpness(&mut net, &[eval.as_batch()], rho, 32, &mut rng)?;
                Some(rep.mean_increase)
            }
            None => None,
        };
        summaries.push(RunSummary {
            dir: dir.display().to_string(),
            method: cfg.optim.method.name().to_string(),
            seed: cfg.run.seed,
            final_eval_metric,
            final_eval_loss,
            late_loss_gap,
            late_metric_gap,
            clip_triggered,
            sharpness_mean,
        });
    }

    std::fs::create_dir_all(out)?;
    let mut wtr = csv::Writer::from_path(out.join("report.csv"))?;
    wtr.write_record([
        "dir",
        "method",
        "seed",
        "final_eval_metric",
        "final_eval_loss",
        "late_loss_gap",
        "late_metric_gap",
        "clip_triggered",
        "sharpness_mean",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for s in &summaries {
        wtr.write_record([
            s.dir.clone(),
            s.method.clone(),
            s.seed.to_string(),
            format!("{:?}", s.final_eval_metric),
            format!("{:?}", s.final_eval_loss),
            format!("{:?}", s.late_loss_gap),
            format!("{:?}", s.late_metric_gap),
            s.clip_triggered.to_string(),
            s.sharpness_mean.map(|v| format!("{v:?}")).unwrap_or_default(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    wtr.flush()?;
    std::fs::write(out.join("report.txt"), render_report_text(&summaries))?;
    Ok(summaries)
}

fn render_report_text(summaries: &[RunSummary]) -> String {
    use std::fmt::Write as _;
    let mut text = String::new();
    let _ = writeln!(text, "{:<10} {:>6} {:>12} {:>12} {:>12} {:>8}", "method", "seed", "eval_metric", "eval_loss", "loss_gap", "clips");
    for s in summaries {
        let _ = writeln!(
            text,
            "{:<10} {:>6} {:>12.4} {:>12.4} {:>12.4} {:>8}",
            s.method, s.seed, s.final_eval_metric, s.final_eval_loss, s.late_loss_gap, s.clip_triggered
        );
    }
    // per-method aggregates
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry(&s.method).or_default().push(s);
    }
    let _ = writeln!(text, "\nper-method mean +- stderr (final eval metric):");
    for (method, runs) in &groups {
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.final_eval_metric).sum::<f64>() / n;
        let stderr = if runs.len() > 1 {
            let var = runs.iter().map(|r| (r.final_eval_metric - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        let _ = writeln!(text, "  {method:<10} {mean:.4} +- {stderr:.4} (n={})", runs.len());
    }
    // sign test between method pairs with matching seeds
    let methods: Vec<&&str> = groups.keys().collect();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            let (a, b) = (*methods[i], *methods[j]);
            let by_seed = |m: &str| -> BTreeMap<u64, f64> {
                groups[m].iter().map(|r| (r.seed, r.final_eval_metric)).collect()
            };
            let (ma, mb) = (by_seed(a), by_seed(b));
            let mut wins_a = 0usize;
            let mut wins_b = 0usize;
            let mut ties = 0usize;
            for (seed, va) in &ma {
                if let Some(vb) = mb.get(seed) {
                    if va > vb {
                        wins_a += 1;
                    } else if vb > va {
                        wins_b += 1;
                    } else {
                        ties += 1;
                    }
                }
            }
            if wins_a + wins_b + ties > 0 {
                let _ = writeln!(
                    text,
                    "\nsign test {a} vs {b}: {wins_a} wins / {wins_b} losses / {ties} ties (paired by seed)"
                );
            }
        }
    }
    text
}

/// Sharpness of a finished run's final model on its eval split.
pub fn sharpness_of_run(run_dir: &Path, rho: f64, n_samples: usize) -> Result<SharpnessReport> {
    let records = runlog::read_runlog(&run_dir.join("runlog.jsonl"))?;
    let cfg = runlog::header_config(&records)
        .ok_or_else(|| Error::Data("run log has no header".into()))?
        .clone();
    let mut net = checkpoint::load_network(&run_dir.join("merged.ckpt"))?;
    let (_, eval) = build_datasets(&cfg)?;
    let mut rng = RngStream::new(cfg.run.seed, streams::DIAG);
    estimate_sharpness(&mut net, &[eval.as_batch()], rho, n_samples, &mut rng)
}
