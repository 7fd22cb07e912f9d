//! Experiment configuration: flat, typed TOML with sections. Unknown keys
//! are hard errors so a typo in a hyperparameter name can never silently
//! fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::net::{Activation, LossKind, ModelSpec};
use crate::optim::{AdamwParams, BaseRule, Method, NormScope, OptimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub train_size: usize,
    pub eval_size: usize,
    pub label_noise: f64,
    /// For `kind = "csv-file"`: paths to the train/eval tables.
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::TwoGaussians,
            train_size: 200,
            eval_size: 2000,
            label_noise: 0.1,
            train_path: None,
            eval_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub adapter_layers: Vec<usize>,
    pub rank: usize,
    pub alpha: f64,
    pub aux_rank: usize,
    pub aux_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layer_dims: vec![2, 32, 32, 2],
            activation: Activation::Relu,
            loss: LossKind::SoftmaxCrossEntropy,
            adapter_layers: vec![0, 1, 2],
            rank: 8,
            alpha: 16.0,
            aux_rank: 8,
            aux_alpha: 16.0,
        }
    }
}

impl ModelConfig {
    pub fn to_spec(&self) -> Result<ModelSpec> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("model.layer_dims needs at least two entries".into()));
        }
        let n_layers = self.layer_dims.len() - 1;
        // hidden layers use the configured activation, the head is identity
        let mut activations = vec![self.activation; n_layers.saturating_sub(1)];
        activations.push(Activation::Identity);
        let spec = ModelSpec {
            layer_dims: self.layer_dims.clone(),
            activations,
            loss: self.loss,
            adapter_layers: self.adapter_layers.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub method: Method,
    pub eta1: f64,
    /// Defaults to `eta1` when unset.
    pub eta2: Option<f64>,
    pub rho: f64,
    pub base_rule: BaseRule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub sam_norm_scope: NormScope,
    pub clip_includes_scaling: bool,
    pub schedule: Schedule,
    /// Warmup fraction of total steps (cosine schedule only).
    pub warmup_frac: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        // paper-default profile: eta 5e-4, r1 = 8, alpha 16, cosine schedule
        // with 3% warmup
        OptimSection {
            method: Method::BiLora,
            eta1: 5e-4,
            eta2: None,
            rho: 0.05,
            base_rule: BaseRule::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            sam_norm_scope: NormScope::Global,
            clip_includes_scaling: true,
            schedule: Schedule::Cosine,
            warmup_frac: 0.03,
        }
    }
}

impl OptimSection {
    pub fn to_optim_config(&self) -> Result<OptimConfig> {
        let cfg = OptimConfig {
            method: self.method,
            eta1: self.eta1,
            eta2: self.eta2.unwrap_or(self.eta1),
            rho: self.rho,
            base_rule: self.base_rule,
            adamw: AdamwParams {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            sam_norm_scope: self.sam_norm_scope,
            clip_includes_scaling: self.clip_includes_scaling,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning-rate multiplier for step `k` of `total`.
    pub fn lr_scale(&self, k: u64, total: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                let warmup = ((self.warmup_frac * total as f64).floor() as u64).max(1);
                if k < warmup {
                    (k + 1) as f64 / warmup as f64
                } else {
                    let span = (total - warmup).max(1) as f64;
                    let progress = (k - warmup) as f64 / span;
                    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub snapshot_every: u64,
    /// Cadence of the term-norm / subspace instruments (0 disables them).
    pub diag_every: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Base checkpoint to fine-tune from (produced by `pretrain`).
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 1000,
            batch_size: 32,
            eval_every: 50,
            snapshot_every: 25,
            diag_every: 10,
            seed: 42,
            output_dir: PathBuf::from("runs/out"),
            base_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub optim: OptimSection,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.task.label_noise) {
            return Err(Error::Config("task.label_noise must lie in [0, 1)".into()));
        }
        if self.task.train_size == 0 || self.task.eval_size == 0 {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        if self.run.batch_size == 0 {
            return Err(Error::Config("run.batch_size must be >= 1".into()));
        }
        self.model.to_spec()?;
        self.optim.to_optim_config()?;
        if self.optim.method.uses_adapters() && self.model.adapter_layers.is_empty() {
            return Err(Error::Config(format!(
                "method '{}' requires model.adapter_layers",
                self.optim.method.name()
            )));
        }
        Ok(())
    }
}

/// Parse a TOML config file, then apply `key.path=value` overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: ExperimentConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `section.key=value` override to a parsed TOML document. The
/// value is parsed as TOML (so `0.1`, `true`, `"lora"` and `[1, 2]` all
/// work); bare words fall back to strings.
pub fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut cursor = doc;
    let parts: Vec<&str> = path.trim().split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' crosses a non-table")))?
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cursor
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path '{path}' crosses a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = parse_config("", &[]).unwrap();
        assert_eq!(cfg.optim.method, Method::BiLora);
        assert_eq!(cfg.optim.eta1, 5e-4);
        assert_eq!(cfg.model.rank, 8);
        assert_eq!(cfg.model.alpha, 16.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("[optim]\nlearning_rate = 0.1\n", &[]).unwrap_err();
        assert_eq!(err.class(), "config-error");
    }

    #[test]
    fn overrides_apply() {
        let cfg = parse_config(
            "[optim]\nrho = 0.01\n",
            &["optim.rho=0.2".into(), "optim.method=\"lora\"".into(), "run.seed=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.optim.rho, 0.2);
        assert_eq!(cfg.optim.method, Method::Lora);
        assert_eq!(cfg.run.seed, 7);
    }

    #[test]
    fn bad_override_is_config_error() {
        let err = parse_config("", &["optim.rho".into()]).unwrap_err();
        assert_eq!(err.class(), "config-error");
    }

    #[test]
    fn label_noise_bounds_enforced() {
        let err = parse_config("[task]\nlabel_noise = 1.0\n", &[]).unwrap_err();
        assert_eq!(err.class(), "config-error");
    }

    #[test]
    fn cosine_schedule_shape() {
        let mut o = OptimSection::default();
        o.schedule = Schedule::Cosine;
        o.warmup_frac = 0.1;
        let total = 100;
        assert!(o.lr_scale(0, total) > 0.0);
        assert!(o.lr_scale(9, total) <= 1.0 + 1e-12);
        assert!((o.lr_scale(9, total) - 1.0).abs() <= 1e-12); // end of warmup
        assert!(o.lr_scale(50, total) < 1.0);
        assert!(o.lr_scale(99, total) < o.lr_scale(50, total));
    }

    #[test]
    fn eta2_defaults_to_eta1() {
        let cfg = parse_config("[optim]\neta1 = 0.003\n", &[]).unwrap();
        let oc = cfg.optim.to_optim_config().unwrap();
        assert_eq!(oc.eta2, 0.003);
    }
}
