//! Low-rank adapter pairs attached to frozen linear layers.
//!
//! A `LoRALinear` carries a frozen base weight plus a primary pair (B1, A1)
//! that is trained by descent and an optional auxiliary pair (B2, A2) that
//! models the adversarial weight perturbation. Scaling `s = alpha / rank` is
//! always applied explicitly when the effective weight or the projected
//! gradients are formed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{seeded_gaussian, Matrix, RngStream};
use crate::net::{Layer, LayerWeights, Network};

/// One low-rank factor pair `B (m x r)` and `A (r x n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub b: Matrix,
    pub a: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterPair {
    /// Effective scaling factor, recomputed on demand so it can never go stale.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The effective low-rank delta `s * B * A`.
    pub fn delta(&self) -> Result<Matrix> {
        Ok(self.b.matmul(&self.a)?.scaled(self.scaling()))
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }
}

/// Frozen base weight plus primary and optional auxiliary adapter pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRALinear {
    pub base: Matrix,
    pub primary: AdapterPair,
    pub auxiliary: Option<AdapterPair>,
}

/// Fresh adapter pair: B is zero so the adapted layer initially equals the
/// base layer exactly; A is Gaussian with stddev `1/sqrt(n)`.
pub fn init_adapter(m: usize, n: usize, rank: usize, alpha: f64, rng: &mut RngStream) -> AdapterPair {
    assert!(rank >= 1, "adapter rank must be >= 1");
    if rank > m.min(n) {
        log::warn!("adapter rank {rank} exceeds min({m}, {n}); permitted but wasteful");
    }
    let stddev = 1.0 / (n as f64).sqrt();
    AdapterPair {
        b: Matrix::zeros(m, rank),
        a: seeded_gaussian(rank, n, rng, stddev),
        rank,
        alpha,
    }
}

/// `W0 + s1 B1 A1`, plus `s2 B2 A2` when requested and present.
pub fn effective_weight(layer: &LoRALinear, include_aux: bool) -> Result<Matrix> {
    let mut w = layer.base.clone();
    w.axpy(layer.primary.scaling(), &layer.primary.b.matmul(&layer.primary.a)?)?;
    if include_aux {
        if let Some(aux) = &layer.auxiliary {
            w.axpy(aux.scaling(), &aux.b.matmul(&aux.a)?)?;
        }
    }
    Ok(w)
}

/// Chain-rule projection of the merged-weight gradient onto the factors:
/// `gB = s * G * A^T`, `gA = s * B^T * G`. The scaling is folded in so these
/// are the true partials of the loss w.r.t. the stored B and A.
pub fn project_grad(g: &Matrix, pair: &AdapterPair) -> Result<(Matrix, Matrix)> {
    if g.rows() != pair.out_dim() || g.cols() != pair.in_dim() {
        return Err(Error::shape(
            "project_grad",
            g.shape_str(),
            format!("{}x{}", pair.out_dim(), pair.in_dim()),
        ));
    }
    let s = pair.scaling();
    let gb = g.matmul_nt(&pair.a)?.scaled(s);
    let ga = pair.b.matmul_tn(g)?.scaled(s);
    Ok((gb, ga))
}

/// Collapse every adapted layer into a plain linear layer carrying
/// `W0 + s1 B1 A1`; auxiliary pairs are dropped entirely. The result has
/// zero adapter parameters and is what ships for inference.
pub fn merge_for_inference(net: &Network) -> Result<Network> {
    let mut merged = net.clone();
    for layer in &mut merged.layers {
        if let LayerWeights::Adapted(lora) = &layer.weights {
            let w = effective_weight(lora, false)?;
            layer.weights = LayerWeights::Plain(w);
        }
    }
    merged.spec.adapter_layers.clear();
    merged.reset_backward_count();
    Ok(merged)
}

/// Attach fresh adapter pairs to the given layers of a plain network, turning
/// its weights into frozen bases.
pub fn attach_adapters(
    net: &mut Network,
    layer_indices: &[usize],
    rank: usize,
    alpha: f64,
    aux_rank: usize,
    aux_alpha: f64,
    rng: &mut RngStream,
) -> Result<()> {
    for &idx in layer_indices {
        let layer: &mut Layer = net
            .layers
            .get_mut(idx)
            .ok_or_else(|| Error::Config(format!("adapter layer index {idx} out of range")))?;
        let base = match &layer.weights {
            LayerWeights::Plain(w) => w.clone(),
            LayerWeights::Adapted(_) => {
                return Err(Error::Config(format!("layer {idx} already carries adapters")))
            }
        };
        let (m, n) = base.shape();
        let primary = init_adapter(m, n, rank, alpha, rng);
        let auxiliary = if aux_rank > 0 {
            Some(init_adapter(m, n, aux_rank, aux_alpha, rng))
        } else {
            None
        };
        layer.weights = LayerWeights::Adapted(LoRALinear { base, primary, auxiliary });
    }
    net.spec.adapter_layers = layer_indices.to_vec();
    Ok(())
}
