//! Low-rank adapter fine-tuning laboratory.
//!
//! Deterministic dense linear algebra, small MLP classifiers, low-rank
//! adapters, sharpness-aware optimizers (full and factor-space), a
//! dual-module adapter method with a bounded adversarial auxiliary, and the
//! diagnostics to study their geometry: expansion term norms, subspace
//! residuals, loss-landscape scans and sharpness probes.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod net;
pub mod optim;
pub mod runlog;

pub use adapters::{AdapterPair, LoRALinear};
pub use config::ExperimentConfig;
pub use data::{Dataset, TaskKind};
pub use error::{Error, Result};
pub use linalg::{Matrix, RngStream};
pub use net::{Batch, ModelSpec, Network};
pub use optim::{Method, OptimConfig, OptimState, StepReport};
pub use runlog::LogRecord;
