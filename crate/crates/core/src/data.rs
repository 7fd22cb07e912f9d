//! Deterministic synthetic datasets and their tabular (CSV) file format.
//!
//! Classification files have columns `x0,...,x{d-1},label`; regression files
//! have `x0,...,x{d-1},y`. Generation is a pure function of
//! `(task, sizes, noise, seed)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{seeded_gaussian, Matrix, RngStream};
use crate::net::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TwoGaussians,
    TwoMoons,
    Spiral,
    LinearRegression,
    CsvFile,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "two-gaussians" => Ok(TaskKind::TwoGaussians),
            "two-moons" => Ok(TaskKind::TwoMoons),
            "spiral" => Ok(TaskKind::Spiral),
            "linear-regression" => Ok(TaskKind::LinearRegression),
            "csv-file" => Ok(TaskKind::CsvFile),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskKind::LinearRegression)
    }
}

/// In-memory dataset: inputs plus one-hot (classification) or scalar
/// (regression) targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub classification: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_batch(&self) -> Batch {
        Batch::new(self.inputs.clone(), self.targets.clone()).expect("dataset rows aligned")
    }

    pub fn batch_of(&self, indices: &[usize]) -> Batch {
        let mut inputs = Matrix::zeros(indices.len(), self.inputs.cols());
        let mut targets = Matrix::zeros(indices.len(), self.targets.cols());
        for (row, &i) in indices.iter().enumerate() {
            for j in 0..self.inputs.cols() {
                inputs.set(row, j, self.inputs.get(i, j));
            }
            for j in 0..self.targets.cols() {
                targets.set(row, j, self.targets.get(i, j));
            }
        }
        Batch::new(inputs, targets).expect("aligned by construction")
    }
}

/// Deterministic synthetic dataset. Two-class tasks are balanced; for
/// classification, `noise` flips exactly `round(noise * n)` labels chosen by
/// a seeded permutation.
pub fn generate(task: &TaskKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::Config("label-noise must lie in [0, 1)".into()));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut ds = match task {
        TaskKind::TwoGaussians => two_gaussians(n, &mut rng),
        TaskKind::TwoMoons => two_moons(n, &mut rng),
        TaskKind::Spiral => spiral(n, &mut rng),
        TaskKind::LinearRegression => linear_regression(n, &mut rng),
        TaskKind::CsvFile => {
            return Err(Error::Config("csv-file task reads from a path, not a generator".into()))
        }
    };
    if task.is_classification() && noise > 0.0 {
        let flips = (noise * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut flip_rng = RngStream::new(seed, 1);
        idx.shuffle(&mut flip_rng);
        for &i in idx.iter().take(flips) {
            // swap the one-hot row (two-class)
            let a = ds.targets.get(i, 0);
            let b = ds.targets.get(i, 1);
            ds.targets.set(i, 0, b);
            ds.targets.set(i, 1, a);
        }
    }
    Ok(ds)
}

fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut t = Matrix::zeros(labels.len(), classes);
    for (i, &c) in labels.iter().enumerate() {
        t.set(i, c, 1.0);
    }
    t
}

/// Two unit-variance Gaussian blobs separated by 4 sigma along x0; linearly
/// separable in expectation.
fn two_gaussians(n: usize, rng: &mut RngStream) -> Dataset {
    let noise = seeded_gaussian(n, 2, rng, 1.0);
    let mut inputs = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let cx = if c == 0 { -2.0 } else { 2.0 };
        inputs.set(i, 0, cx + noise.get(i, 0));
        inputs.set(i, 1, noise.get(i, 1));
        labels.push(c);
    }
    Dataset {
        inputs,
        targets: one_hot(&labels, 2),
        classification: true,
    }
}

fn two_moons(n: usize, rng: &mut RngStream) -> Dataset {
    let jitter = seeded_gaussian(n, 2, rng, 0.1);
    let mut inputs = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let frac = (i / 2) as f64 / ((n + 1) / 2).max(1) as f64;
        let theta = std::f64::consts::PI * frac;
        let (x, y) = if c == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        inputs.set(i, 0, x + jitter.get(i, 0));
        inputs.set(i, 1, y + jitter.get(i, 1));
        labels.push(c);
    }
    Dataset {
        inputs,
        targets: one_hot(&labels, 2),
        classification: true,
    }
}

fn spiral(n: usize, rng: &mut RngStream) -> Dataset {
    let jitter = seeded_gaussian(n, 2, rng, 0.05);
    let mut inputs = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let frac = (i / 2) as f64 / ((n + 1) / 2).max(1) as f64;
        let r = 0.2 + 0.8 * frac;
        let theta = 3.0 * std::f64::consts::PI * frac + if c == 0 { 0.0 } else { std::f64::consts::PI };
        inputs.set(i, 0, r * theta.cos() + jitter.get(i, 0));
        inputs.set(i, 1, r * theta.sin() + jitter.get(i, 1));
        labels.push(c);
    }
    Dataset {
        inputs,
        targets: one_hot(&labels, 2),
        classification: true,
    }
}

fn linear_regression(n: usize, rng: &mut RngStream) -> Dataset {
    let d = 4;
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let inputs = seeded_gaussian(n, d, rng, 1.0);
    let obs_noise = seeded_gaussian(n, 1, rng, 0.05);
    let mut targets = Matrix::zeros(n, 1);
    for i in 0..n {
        let mut y = 0.0;
        for j in 0..d {
            y += inputs.get(i, j) * w[j];
        }
        targets.set(i, 0, y + obs_noise.get(i, 0));
    }
    Dataset {
        inputs,
        targets,
        classification: false,
    }
}

/// Write the dataset as a plain CSV file.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let d = ds.inputs.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push(if ds.classification { "label".into() } else { "y".into() });
    wtr.write_record(&header)
        .map_err(|e| Error::Data(e.to_string()))?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = (0..d).map(|j| format!("{:?}", ds.inputs.get(i, j))).collect();
        if ds.classification {
            let label = (0..ds.targets.cols())
                .find(|&j| ds.targets.get(i, j) == 1.0)
                .unwrap_or(0);
            row.push(label.to_string());
        } else {
            row.push(format!("{:?}", ds.targets.get(i, 0)));
        }
        wtr.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a CSV file written by [`write_csv`] (or hand-made with the same
/// columns).
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .clone();
    let last = headers
        .iter()
        .last()
        .ok_or_else(|| Error::Data("empty CSV header".into()))?
        .to_string();
    let classification = last == "label";
    let d = headers.len() - 1;
    let mut xs: Vec<f64> = Vec::new();
    let mut raw_targets: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        if rec.len() != d + 1 {
            return Err(Error::Data(format!("row {} has {} fields, expected {}", n + 1, rec.len(), d + 1)));
        }
        for j in 0..d {
            xs.push(
                rec[j]
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("row {}: {e}", n + 1)))?,
            );
        }
        raw_targets.push(
            rec[d]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("row {}: {e}", n + 1)))?,
        );
        n += 1;
    }
    let inputs = Matrix::from_vec(n, d, xs)?;
    let targets = if classification {
        let classes = raw_targets.iter().map(|v| *v as usize).max().unwrap_or(0) + 1;
        let labels: Vec<usize> = raw_targets.iter().map(|v| *v as usize).collect();
        one_hot(&labels, classes.max(2))
    } else {
        Matrix::from_vec(n, 1, raw_targets)?
    };
    Ok(Dataset {
        inputs,
        targets,
        classification,
    })
}
