//! Small feedforward classifier/regressor with explicit forward caching and
//! reverse-mode backpropagation.
//!
//! The backward pass produces the gradient of the loss w.r.t. each layer's
//! *merged* weight; adapter-factor gradients are derived from it downstream
//! via [`crate::adapters::project_grad`]. This lets a single backward pass
//! serve both the primary and the auxiliary adapter updates.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::adapters::{effective_weight, LoRALinear};
use crate::error::{Error, Result};
use crate::linalg::{seeded_gaussian, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative as a function of the pre-activation value.
    #[inline]
    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

/// Architecture description: `layer_dims` has one more entry than there are
/// layers; `activations[i]` follows layer `i` (the last layer feeds the loss
/// head directly and normally uses `Identity`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub loss: LossKind,
    pub adapter_layers: Vec<usize>,
}

impl ModelSpec {
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.activations.len() != self.num_layers() {
            return Err(Error::Config(format!(
                "expected {} activations, got {}",
                self.num_layers(),
                self.activations.len()
            )));
        }
        for &idx in &self.adapter_layers {
            if idx >= self.num_layers() {
                return Err(Error::Config(format!(
                    "adapter placement index {idx} out of range (layers: {})",
                    self.num_layers()
                )));
            }
        }
        Ok(())
    }
}

/// Mini-batch: inputs are `batch x features`, targets are one-hot rows for
/// classification or plain regression targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::shape("batch", inputs.shape_str(), targets.shape_str()));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerWeights {
    Plain(Matrix),
    Adapted(LoRALinear),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: LayerWeights,
    /// Bias row vector, `1 x out_dim`.
    pub bias: Matrix,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        match &self.weights {
            LayerWeights::Plain(w) => w.rows(),
            LayerWeights::Adapted(l) => l.base.rows(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match &self.weights {
            LayerWeights::Plain(w) => w.cols(),
            LayerWeights::Adapted(l) => l.base.cols(),
        }
    }

    pub fn effective_weight(&self, include_aux: bool) -> Result<Matrix> {
        match &self.weights {
            LayerWeights::Plain(w) => Ok(w.clone()),
            LayerWeights::Adapted(l) => effective_weight(l, include_aux),
        }
    }

    pub fn adapted(&self) -> Option<&LoRALinear> {
        match &self.weights {
            LayerWeights::Adapted(l) => Some(l),
            LayerWeights::Plain(_) => None,
        }
    }

    pub fn adapted_mut(&mut self) -> Option<&mut LoRALinear> {
        match &mut self.weights {
            LayerWeights::Adapted(l) => Some(l),
            LayerWeights::Plain(_) => None,
        }
    }
}

/// Ordered stack of (possibly adapted) linear layers with a loss head.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub spec: ModelSpec,
    backward_count: Cell<u64>,
}

impl Network {
    /// Fresh plain network; weights Gaussian with stddev `1/sqrt(fan_in)`,
    /// biases zero.
    pub fn new(spec: ModelSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for l in 0..spec.num_layers() {
            let (n_in, n_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            let w = seeded_gaussian(n_out, n_in, rng, 1.0 / (n_in as f64).sqrt());
            layers.push(Layer {
                weights: LayerWeights::Plain(w),
                bias: Matrix::zeros(1, n_out),
            });
        }
        Ok(Network {
            layers,
            spec,
            backward_count: Cell::new(0),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.spec.layer_dims.last().unwrap()
    }

    /// Total scalar parameter count (merged-weight view).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.out_dim() * l.in_dim() + l.out_dim())
            .sum()
    }

    pub fn backward_count(&self) -> u64 {
        self.backward_count.get()
    }

    pub fn reset_backward_count(&self) {
        self.backward_count.set(0);
    }

    /// FNV-1a over the bit patterns of every frozen base weight. Used to
    /// assert the frozen-base invariant across fine-tune runs.
    pub fn base_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for layer in &self.layers {
            if let LayerWeights::Adapted(l) = &layer.weights {
                for v in l.base.data() {
                    feed(&v.to_le_bytes());
                }
            }
        }
        h
    }

    /// Forward pass. Applies `W0 + s1 B1 A1 (+ s2 B2 A2)` per adapted layer
    /// and caches inputs, pre-activations and materialized weights for the
    /// backward pass.
    pub fn forward(&self, inputs: &Matrix, include_aux: bool) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward input",
                inputs.shape_str(),
                format!("_x{}", self.input_dim()),
            ));
        }
        let mut cache = ForwardCache {
            layer_inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::with_capacity(self.layers.len()),
            effective: Vec::with_capacity(self.layers.len()),
            include_aux,
        };
        let mut x = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = layer.effective_weight(include_aux)?;
            let mut pre = x.matmul_nt(&w)?; // batch x out
            for i in 0..pre.rows() {
                for j in 0..pre.cols() {
                    let v = pre.get(i, j) + layer.bias.get(0, j);
                    pre.set(i, j, v);
                }
            }
            let act = self.spec.activations[l];
            let mut out = pre.clone();
            if act != Activation::Identity {
                for v in out.data_mut() {
                    *v = act.apply(*v);
                }
            }
            cache.layer_inputs.push(x);
            cache.preacts.push(pre);
            cache.effective.push(w);
            x = out;
        }
        Ok((x, cache))
    }

    /// Exact reverse-mode gradient of the loss w.r.t. every layer's merged
    /// weight and bias.
    pub fn backward(&self, cache: &ForwardCache, batch: &Batch) -> Result<GradientSet> {
        self.backward_count.set(self.backward_count.get() + 1);
        if cache.layer_inputs.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "stale cache: {} cached layers vs {} network layers",
                cache.layer_inputs.len(),
                self.layers.len()
            )));
        }
        let last = self.layers.len() - 1;
        let batch_n = batch.len() as f64;

        // output-layer activation applied to the last preact
        let out_act = self.spec.activations[last];
        let preds = {
            let mut p = cache.preacts[last].clone();
            if out_act != Activation::Identity {
                for v in p.data_mut() {
                    *v = out_act.apply(*v);
                }
            }
            p
        };
        if preds.shape() != batch.targets.shape() {
            return Err(Error::shape("backward targets", preds.shape_str(), batch.targets.shape_str()));
        }

        // d(loss)/d(output)
        let mut d_out = match self.spec.loss {
            LossKind::SoftmaxCrossEntropy => {
                let sm = softmax(&preds);
                let mut d = sm.sub(&batch.targets)?;
                d.scale_in_place(1.0 / batch_n);
                d
            }
            LossKind::MeanSquaredError => {
                let mut d = preds.sub(&batch.targets)?;
                d.scale_in_place(2.0 / batch_n);
                d
            }
        };

        let mut weight_grads: Vec<Matrix> = vec![Matrix::zeros(0, 0); self.layers.len()];
        let mut bias_grads: Vec<Matrix> = vec![Matrix::zeros(0, 0); self.layers.len()];

        for l in (0..self.layers.len()).rev() {
            // through the activation of layer l
            let act = self.spec.activations[l];
            let mut d_pre = d_out;
            if act != Activation::Identity {
                let pre = &cache.preacts[l];
                for (i, v) in d_pre.data_mut().iter_mut().enumerate() {
                    *v *= act.grad(pre.data()[i]);
                }
            }
            // gW = dPre^T * X, gb = column sums of dPre
            weight_grads[l] = d_pre.matmul_tn(&cache.layer_inputs[l])?;
            let mut gb = Matrix::zeros(1, d_pre.cols());
            for i in 0..d_pre.rows() {
                for j in 0..d_pre.cols() {
                    let v = gb.get(0, j) + d_pre.get(i, j);
                    gb.set(0, j, v);
                }
            }
            bias_grads[l] = gb;
            if l > 0 {
                d_out = d_pre.matmul(&cache.effective[l])?;
            } else {
                d_out = Matrix::zeros(0, 0);
            }
        }

        Ok(GradientSet {
            weights: weight_grads,
            biases: bias_grads,
        })
    }
}

/// Activation record retained by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layer_inputs: Vec<Matrix>,
    pub preacts: Vec<Matrix>,
    /// Materialized effective weight per layer, reused by backward.
    pub effective: Vec<Matrix>,
    pub include_aux: bool,
}

/// Merged-weight gradient per layer plus bias gradients; shapes mirror the
/// network exactly.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl GradientSet {
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in self.weights.iter().chain(self.biases.iter()) {
            acc += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        acc.sqrt()
    }
}

fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row_max = logits.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..out.cols() {
            let e = (logits.get(i, j) - row_max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..out.cols() {
            let v = out.get(i, j) / sum;
            out.set(i, j, v);
        }
    }
    out
}

/// Batch-mean scalar loss; softmax uses row-max subtraction.
pub fn loss(predictions: &Matrix, targets: &Matrix, kind: LossKind) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(Error::shape("loss", predictions.shape_str(), targets.shape_str()));
    }
    let n = predictions.rows() as f64;
    match kind {
        LossKind::MeanSquaredError => {
            let mut acc = 0.0;
            for (p, t) in predictions.data().iter().zip(targets.data()) {
                let d = p - t;
                acc += d * d;
            }
            Ok(acc / n)
        }
        LossKind::SoftmaxCrossEntropy => {
            let mut acc = 0.0;
            for i in 0..predictions.rows() {
                let row = predictions.row(i);
                let row_max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_z = row.iter().map(|v| (v - row_max).exp()).sum::<f64>().ln() + row_max;
                for j in 0..predictions.cols() {
                    let t = targets.get(i, j);
                    if t != 0.0 {
                        acc -= t * (predictions.get(i, j) - log_z);
                    }
                }
            }
            Ok(acc / n)
        }
    }
}

/// Forward + loss in one call.
pub fn evaluate_loss(net: &Network, batch: &Batch, include_aux: bool) -> Result<f64> {
    let (preds, _) = net.forward(&batch.inputs, include_aux)?;
    loss(&preds, &batch.targets, net.spec.loss)
}

/// Classification accuracy (argmax match) or, for regression targets,
/// negative MSE so "higher is better" holds uniformly.
pub fn evaluate_metric(net: &Network, batch: &Batch, include_aux: bool) -> Result<f64> {
    let (preds, _) = net.forward(&batch.inputs, include_aux)?;
    match net.spec.loss {
        LossKind::SoftmaxCrossEntropy => {
            let mut correct = 0usize;
            for i in 0..preds.rows() {
                let p_arg = argmax(preds.row(i));
                let t_arg = argmax(batch.targets.row(i));
                if p_arg == t_arg {
                    correct += 1;
                }
            }
            Ok(correct as f64 / preds.rows() as f64)
        }
        LossKind::MeanSquaredError => Ok(-loss(&preds, &batch.targets, LossKind::MeanSquaredError)?),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Central-difference estimate of the merged-weight and bias gradients.
/// O(P) forward passes; intended for tiny oracle networks only.
pub fn finite_difference_grad(net: &Network, batch: &Batch, step: f64) -> Result<GradientSet> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut weights: Vec<Matrix> = Vec::with_capacity(net.layers.len());
    let mut biases: Vec<Matrix> = Vec::with_capacity(net.layers.len());
    let base_weights: Vec<Matrix> = net
        .layers
        .iter()
        .map(|l| l.effective_weight(true))
        .collect::<Result<_>>()?;
    let base_biases: Vec<Matrix> = net.layers.iter().map(|l| l.bias.clone()).collect();

    let eval = |ws: &[Matrix], bs: &[Matrix]| -> Result<f64> {
        let preds = forward_explicit(&net.spec, ws, bs, &batch.inputs)?;
        loss(&preds, &batch.targets, net.spec.loss)
    };

    for l in 0..net.layers.len() {
        let mut gw = Matrix::zeros(base_weights[l].rows(), base_weights[l].cols());
        for idx in 0..base_weights[l].data().len() {
            let mut ws = base_weights.clone();
            ws[l].data_mut()[idx] += step;
            let up = eval(&ws, &base_biases)?;
            ws[l].data_mut()[idx] -= 2.0 * step;
            let down = eval(&ws, &base_biases)?;
            gw.data_mut()[idx] = (up - down) / (2.0 * step);
        }
        weights.push(gw);

        let mut gb = Matrix::zeros(1, base_biases[l].cols());
        for idx in 0..base_biases[l].data().len() {
            let mut bs = base_biases.clone();
            bs[l].data_mut()[idx] += step;
            let up = eval(&base_weights, &bs)?;
            bs[l].data_mut()[idx] -= 2.0 * step;
            let down = eval(&base_weights, &bs)?;
            gb.data_mut()[idx] = (up - down) / (2.0 * step);
        }
        biases.push(gb);
    }
    Ok(GradientSet { weights, biases })
}

/// Forward pass with explicit per-layer weight matrices, used by the
/// finite-difference oracle so merged weights can be perturbed directly.
pub fn forward_explicit(
    spec: &ModelSpec,
    weights: &[Matrix],
    biases: &[Matrix],
    inputs: &Matrix,
) -> Result<Matrix> {
    let mut x = inputs.clone();
    for l in 0..weights.len() {
        let mut pre = x.matmul_nt(&weights[l])?;
        for i in 0..pre.rows() {
            for j in 0..pre.cols() {
                let v = pre.get(i, j) + biases[l].get(0, j);
                pre.set(i, j, v);
            }
        }
        let act = spec.activations[l];
        if act != Activation::Identity {
            for v in pre.data_mut() {
                *v = act.apply(*v);
            }
        }
        x = pre;
    }
    Ok(x)
}
