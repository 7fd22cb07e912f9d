//! Measurement instruments: perturbation-term norms, convergence
//! trajectories, 1-D loss-landscape scans, sharpness estimates and subspace
//! residual reports. Instruments never mutate live training state; the scan
//! and sharpness routines restore every parameter bitwise from saved copies.

use serde::{Deserialize, Serialize};

use crate::adapters::{project_grad, LoRALinear};
use crate::error::{Error, Result};
use crate::linalg::{
    column_space_residual, orthonormal_basis, row_space_residual, seeded_gaussian, Matrix, RngStream,
};
use crate::net::{evaluate_loss, Batch, LayerWeights, Network};

/// Norms of the three terms of the factor-perturbation expansion
/// `(B+eB)(A+eA) - BA = B eA + eB A + eB eA` for one layer at one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermNormRecord {
    pub step: u64,
    pub layer: usize,
    pub norm_b_eps_a: f64,
    pub norm_eps_b_a: f64,
    pub norm_eps_b_eps_a: f64,
    /// `||B eA + eB A||_F / ||eB eA||_F`; None is the +inf sentinel for a
    /// zero denominator.
    pub ratio: Option<f64>,
    /// `||(B+eB)(A+eA) - BA - (B eA + eB A + eB eA)||_F`, an algebraic
    /// identity check that should vanish to rounding.
    pub reconstruction_residual: f64,
    /// Scale used to normalize the identity check.
    pub reconstruction_scale: f64,
}

/// Cosine-to-final convergence record for one snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub cos_primary: f64,
    pub cos_auxiliary: Option<f64>,
    /// Cosine between primary and auxiliary vectors at this snapshot, when
    /// their flattened lengths match.
    pub cross_cosine: Option<f64>,
    /// Set when a zero-norm vector forced a cosine of 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamSpace {
    /// All adapter factors (primary and auxiliary).
    LoraParams,
    /// Frozen base weights and biases only.
    FullParamsExcludingLora,
    /// Everything.
    AllParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandscapeScan {
    pub space: ParamSpace,
    pub direction_seed: u64,
    pub radii: Vec<f64>,
    /// One loss row per repeat, one entry per radius.
    pub losses: Vec<Vec<f64>>,
    pub repeats: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub rho_eval: f64,
    pub n_samples: usize,
    pub mean_increase: f64,
    pub max_increase: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceReport {
    pub step: u64,
    pub layer: usize,
    /// Residual of the column-space containment, relative to the term norm.
    pub col_residual_rel: f64,
    /// LoRA-SAM only: relative row-space residual of `eB A` w.r.t. Row(A).
    pub row_residual_rel: Option<f64>,
    /// Bi-LoRA only: largest principal-angle cosine between Col(B1) and Col(B2).
    pub overlap_cosine: Option<f64>,
    /// Set when a zero-norm factor made a residual vacuous.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapRecord {
    pub step: u64,
    /// eval loss - train loss
    pub loss_gap: f64,
    /// train metric - eval metric
    pub metric_gap: f64,
}

// ---------------------------------------------------------------------------

/// Computes the LoRA-SAM factor perturbations for this layer at the current
/// point (without applying them) and the three expansion term norms.
/// `f_total` is the normalization constant of the run's norm scope; when
/// `None` it is computed from this layer's projected gradients alone.
pub fn record_term_norms(
    step: u64,
    layer_idx: usize,
    layer: &LoRALinear,
    g: &Matrix,
    rho: f64,
    f_total: Option<f64>,
) -> Result<TermNormRecord> {
    let pair = &layer.primary;
    let (gb, ga) = project_grad(g, pair)?;
    let f = match f_total {
        Some(f) => f,
        None => (gb.frobenius_norm().powi(2) + ga.frobenius_norm().powi(2)).sqrt(),
    };
    let (eps_b, eps_a) = if f == 0.0 {
        (
            Matrix::zeros(gb.rows(), gb.cols()),
            Matrix::zeros(ga.rows(), ga.cols()),
        )
    } else {
        (gb.scaled(rho / f), ga.scaled(rho / f))
    };
    term_norms_from_perturbation(step, layer_idx, &pair.b, &pair.a, &eps_b, &eps_a)
}

/// Expansion term norms and the exact-reconstruction residual for factor
/// perturbations that were already computed elsewhere.
pub fn term_norms_from_perturbation(
    step: u64,
    layer_idx: usize,
    b: &Matrix,
    a: &Matrix,
    eps_b: &Matrix,
    eps_a: &Matrix,
) -> Result<TermNormRecord> {
    let term1 = b.matmul(eps_a)?;
    let term2 = eps_b.matmul(a)?;
    let term3 = eps_b.matmul(eps_a)?;
    let n1 = term1.frobenius_norm();
    let n2 = term2.frobenius_norm();
    let n3 = term3.frobenius_norm();
    let first_two = term1.add(&term2)?;
    let numerator = first_two.frobenius_norm();
    let ratio = if n3 > 0.0 { Some(numerator / n3) } else { None };

    // identity check: (B+eB)(A+eA) - BA == term1 + term2 + term3
    let perturbed = b.add(eps_b)?.matmul(&a.add(eps_a)?)?;
    let base = b.matmul(a)?;
    let lhs = perturbed.sub(&base)?;
    let rhs = first_two.add(&term3)?;
    let reconstruction_residual = lhs.sub(&rhs)?.frobenius_norm();
    let reconstruction_scale = lhs.frobenius_norm().max(perturbed.frobenius_norm()).max(1.0);

    Ok(TermNormRecord {
        step,
        layer: layer_idx,
        norm_b_eps_a: n1,
        norm_eps_b_a: n2,
        norm_eps_b_eps_a: n3,
        ratio,
        reconstruction_residual,
        reconstruction_scale,
    })
}

/// Flattened snapshot of the adapter modules of a network. Each module is
/// represented by its effective weight contribution `s * B * A` per layer,
/// so the vector starts at zero (B inits to zero) and its direction tracks
/// what the module actually adds to the model. Flattening the raw factors
/// instead would be dominated by the constant random init of A and pin
/// every cosine near 1 from the first step.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    pub step: u64,
    pub primary: Vec<f64>,
    pub auxiliary: Option<Vec<f64>>,
}

impl ParamSnapshot {
    pub fn capture(step: u64, net: &Network) -> Self {
        let mut primary = Vec::new();
        let mut auxiliary = Vec::new();
        let mut has_aux = false;
        for layer in &net.layers {
            if let Some(lora) = layer.adapted() {
                let delta = lora.primary.delta().expect("factor shapes agree");
                primary.extend_from_slice(delta.data());
                if let Some(aux) = &lora.auxiliary {
                    has_aux = true;
                    let delta = aux.delta().expect("factor shapes agree");
                    auxiliary.extend_from_slice(delta.data());
                }
            }
        }
        ParamSnapshot {
            step,
            primary,
            auxiliary: if has_aux { Some(auxiliary) } else { None },
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((dot / (na * nb)).clamp(-1.0, 1.0), false)
}

/// Per-snapshot cosine similarity of the flattened module parameters against
/// the final snapshot.
pub fn record_trajectory(snapshots: &[ParamSnapshot], final_snap: &ParamSnapshot) -> Result<Vec<TrajectoryRecord>> {
    if snapshots.len() < 2 {
        return Err(Error::Contract("trajectory needs at least two snapshots".into()));
    }
    let mut out = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        if snap.primary.len() != final_snap.primary.len() {
            return Err(Error::Contract("snapshot shape drift in trajectory".into()));
        }
        let (cos_primary, deg_p) = cosine(&snap.primary, &final_snap.primary);
        let (cos_auxiliary, deg_a) = match (&snap.auxiliary, &final_snap.auxiliary) {
            (Some(a), Some(f)) => {
                let (c, d) = cosine(a, f);
                (Some(c), d)
            }
            _ => (None, false),
        };
        let cross_cosine = snap.auxiliary.as_ref().and_then(|aux| {
            if aux.len() == snap.primary.len() {
                Some(cosine(&snap.primary, aux).0)
            } else {
                None
            }
        });
        out.push(TrajectoryRecord {
            step: snap.step,
            cos_primary,
            cos_auxiliary,
            cross_cosine,
            degenerate: deg_p || deg_a,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// parameter-subset plumbing for scans

fn visit_params_mut(net: &mut Network, space: ParamSpace, mut f: impl FnMut(&mut Matrix)) {
    for layer in &mut net.layers {
        match &mut layer.weights {
            LayerWeights::Plain(w) => {
                if space != ParamSpace::LoraParams {
                    f(w);
                }
            }
            LayerWeights::Adapted(l) => {
                if space != ParamSpace::LoraParams {
                    f(&mut l.base);
                }
                if space != ParamSpace::FullParamsExcludingLora {
                    f(&mut l.primary.b);
                    f(&mut l.primary.a);
                    if let Some(aux) = l.auxiliary.as_mut() {
                        f(&mut aux.b);
                        f(&mut aux.a);
                    }
                }
            }
        }
        if space != ParamSpace::LoraParams {
            f(&mut layer.bias);
        }
    }
}

fn collect_params(net: &mut Network, space: ParamSpace) -> Vec<Matrix> {
    let mut out = Vec::new();
    visit_params_mut(net, space, |m| out.push(m.clone()));
    out
}

fn restore_params(net: &mut Network, space: ParamSpace, saved: &[Matrix]) {
    let mut i = 0;
    visit_params_mut(net, space, |m| {
        *m = saved[i].clone();
        i += 1;
    });
    assert_eq!(i, saved.len(), "parameter walk changed shape");
}

/// Gaussian direction over the selected subset with per-matrix filter
/// normalization: each block is rescaled so its norm matches the norm of the
/// corresponding weight block. Zero-norm blocks (e.g. a fresh B) get a zero
/// direction.
fn filter_normalized_direction(saved: &[Matrix], rng: &mut RngStream) -> Vec<Matrix> {
    saved
        .iter()
        .map(|w| {
            let d = seeded_gaussian(w.rows(), w.cols(), rng, 1.0);
            let dn = d.frobenius_norm();
            let wn = w.frobenius_norm();
            if dn == 0.0 || wn == 0.0 {
                Matrix::zeros(w.rows(), w.cols())
            } else {
                d.scaled(wn / dn)
            }
        })
        .collect()
}

/// Training loss along `net + t * direction` over a radius grid, repeated
/// with independent direction seeds. The network is restored bitwise.
pub fn scan_landscape_1d(
    net: &mut Network,
    batches: &[Batch],
    space: ParamSpace,
    direction_seed: u64,
    radii: &[f64],
    repeats: usize,
) -> Result<LandscapeScan> {
    if radii.is_empty() {
        return Err(Error::Contract("landscape radius grid is empty".into()));
    }
    let saved = collect_params(net, space);
    let mut losses = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let mut rng = RngStream::new(direction_seed, rep as u64);
        let dir = filter_normalized_direction(&saved, &mut rng);
        let mut row = Vec::with_capacity(radii.len());
        for &t in radii {
            let mut i = 0;
            visit_params_mut(net, space, |m| {
                *m = saved[i].clone();
                m.axpy(t, &dir[i]).expect("direction shape matches");
                i += 1;
            });
            let mut loss_acc = 0.0;
            let mut n = 0usize;
            for b in batches {
                loss_acc += evaluate_loss(net, b, true)? * b.len() as f64;
                n += b.len();
            }
            row.push(loss_acc / n as f64);
        }
        losses.push(row);
    }
    restore_params(net, space, &saved);
    Ok(LandscapeScan {
        space,
        direction_seed,
        radii: radii.to_vec(),
        losses,
        repeats,
    })
}

/// Mean/max training-loss increase under `n_samples` random perturbations of
/// global norm `rho_eval` over all parameters. The network is restored
/// bitwise.
pub fn estimate_sharpness(
    net: &mut Network,
    batches: &[Batch],
    rho_eval: f64,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<SharpnessReport> {
    if rho_eval <= 0.0 || n_samples == 0 {
        return Err(Error::Contract("sharpness needs rho_eval > 0 and n_samples >= 1".into()));
    }
    let space = ParamSpace::AllParams;
    let saved = collect_params(net, space);

    let base_loss = {
        let mut acc = 0.0;
        let mut n = 0usize;
        for b in batches {
            acc += evaluate_loss(net, b, true)? * b.len() as f64;
            n += b.len();
        }
        acc / n as f64
    };

    let mut mean = 0.0;
    let mut max = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        // uniform direction on the norm-rho_eval sphere over all parameters
        let mut dir: Vec<Matrix> = saved
            .iter()
            .map(|w| seeded_gaussian(w.rows(), w.cols(), rng, 1.0))
            .collect();
        let norm = dir
            .iter()
            .map(|d| d.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            continue;
        }
        for d in &mut dir {
            d.scale_in_place(rho_eval / norm);
        }
        let mut i = 0;
        visit_params_mut(net, space, |m| {
            *m = saved[i].clone();
            m.axpy(1.0, &dir[i]).expect("direction shape matches");
            i += 1;
        });
        let mut acc = 0.0;
        let mut n = 0usize;
        for b in batches {
            acc += evaluate_loss(net, b, true)? * b.len() as f64;
            n += b.len();
        }
        let increase = acc / n as f64 - base_loss;
        mean += increase;
        max = max.max(increase);
    }
    restore_params(net, space, &saved);
    Ok(SharpnessReport {
        rho_eval,
        n_samples,
        mean_increase: mean / n_samples as f64,
        max_increase: max,
    })
}

/// Context for a subspace-containment check at one training step.
#[derive(Debug)]
pub enum SubspaceContext<'a> {
    /// LoRA-SAM: the primary factors and the applied factor perturbations.
    LoraSam {
        b: &'a Matrix,
        a: &'a Matrix,
        eps_b: &'a Matrix,
        eps_a: &'a Matrix,
    },
    /// Bi-LoRA: primary B1 (for the independence scalar) and the auxiliary pair.
    BiLora {
        b1: &'a Matrix,
        b2: &'a Matrix,
        a2: &'a Matrix,
        s2: f64,
    },
}

/// Residuals of the predicted subspace containments, plus the principal-angle
/// overlap scalar for the dual-module case.
pub fn check_subspaces(step: u64, layer: usize, ctx: &SubspaceContext) -> Result<SubspaceReport> {
    match ctx {
        SubspaceContext::LoraSam { b, a, eps_b, eps_a } => {
            let term1 = b.matmul(eps_a)?;
            let n1 = term1.frobenius_norm();
            let (col_residual_rel, deg1) = if n1 == 0.0 {
                (0.0, true)
            } else {
                (column_space_residual(&term1, b)? / n1, false)
            };
            let term2 = eps_b.matmul(a)?;
            let n2 = term2.frobenius_norm();
            let (row_rel, deg2) = if n2 == 0.0 {
                (0.0, true)
            } else {
                (row_space_residual(&term2, a)? / n2, false)
            };
            Ok(SubspaceReport {
                step,
                layer,
                col_residual_rel,
                row_residual_rel: Some(row_rel),
                overlap_cosine: None,
                degenerate: deg1 || deg2,
            })
        }
        SubspaceContext::BiLora { b1, b2, a2, s2 } => {
            let pert = b2.matmul(a2)?.scaled(*s2);
            let n = pert.frobenius_norm();
            let (col_residual_rel, degenerate) = if n == 0.0 {
                (0.0, true)
            } else {
                (column_space_residual(&pert, b2)? / n, false)
            };
            let overlap = principal_angle_overlap(b1, b2)?;
            Ok(SubspaceReport {
                step,
                layer,
                col_residual_rel,
                row_residual_rel: None,
                overlap_cosine: Some(overlap),
                degenerate,
            })
        }
    }
}

/// Largest cosine of a principal angle between Col(x) and Col(y): the top
/// singular value of `Qx^T Qy`, by deterministic power iteration.
pub fn principal_angle_overlap(x: &Matrix, y: &Matrix) -> Result<f64> {
    let qx = orthonormal_basis(x);
    let qy = orthonormal_basis(y);
    if qx.cols() == 0 || qy.cols() == 0 {
        return Ok(0.0);
    }
    let c = qx.matmul_tn(&qy)?; // rx x ry
    // power iteration on C^T C
    let n = c.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..60 {
        // w = C v; u = C^T w
        let mut w = vec![0.0; c.rows()];
        for i in 0..c.rows() {
            let mut acc = 0.0;
            for j in 0..n {
                acc += c.get(i, j) * v[j];
            }
            w[i] = acc;
        }
        let mut u = vec![0.0; n];
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..c.rows() {
                acc += c.get(i, j) * w[i];
            }
            u[j] = acc;
        }
        let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        for uj in &mut u {
            *uj /= norm;
        }
        sigma = norm.sqrt();
        v = u;
    }
    Ok(sigma.min(1.0))
}

/// Per-evaluation-point generalization gaps from aligned train/eval series.
pub fn track_generalization_gap(
    steps: &[u64],
    train_loss: &[f64],
    eval_loss: &[f64],
    train_metric: &[f64],
    eval_metric: &[f64],
) -> Result<Vec<GapRecord>> {
    let n = steps.len();
    if [train_loss.len(), eval_loss.len(), train_metric.len(), eval_metric.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::Contract("misaligned train/eval series".into()));
    }
    Ok((0..n)
        .map(|i| GapRecord {
            step: steps[i],
            loss_gap: eval_loss[i] - train_loss[i],
            metric_gap: train_metric[i] - eval_metric[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{attach_adapters, AdapterPair};
    use crate::net::{Activation, LossKind, ModelSpec};

    fn adapted_net(seed: u64, aux_rank: usize) -> Network {
        let mut rng = RngStream::new(seed, 0);
        let spec = ModelSpec {
            layer_dims: vec![3, 6, 2],
            activations: vec![Activation::Tanh, Activation::Identity],
            loss: LossKind::SoftmaxCrossEntropy,
            adapter_layers: vec![],
        };
        let mut net = Network::new(spec, &mut rng).unwrap();
        attach_adapters(&mut net, &[0, 1], 2, 4.0, aux_rank, 4.0, &mut rng).unwrap();
        net
    }

    fn class_batch(net: &Network, n: usize, seed: u64) -> Batch {
        use rand::Rng;
        let mut rng = RngStream::new(seed, 61);
        let inputs = seeded_gaussian(n, net.input_dim(), &mut rng, 1.0);
        let mut targets = Matrix::zeros(n, net.output_dim());
        for i in 0..n {
            targets.set(i, rng.gen_range(0..net.output_dim()), 1.0);
        }
        Batch::new(inputs, targets).unwrap()
    }

    #[test]
    fn term_norms_fresh_layer_first_term_zero() {
        let net = adapted_net(1, 0);
        let mut rng = RngStream::new(2, 0);
        let lora = net.layers[0].adapted().unwrap();
        let g = seeded_gaussian(lora.base.rows(), lora.base.cols(), &mut rng, 1.0);
        let rec = record_term_norms(0, 0, lora, &g, 0.05, None).unwrap();
        assert_eq!(rec.norm_b_eps_a, 0.0); // B = 0 at init
        assert!(rec.reconstruction_residual <= 1e-10 * rec.reconstruction_scale);
    }

    #[test]
    fn term_norms_scalar_toy_hand_computed() {
        // 1x1 layer: b, a, g scalars, s = 1
        let lora = LoRALinear {
            base: Matrix::zeros(1, 1),
            primary: AdapterPair {
                b: Matrix::from_rows(&[&[0.8]]),
                a: Matrix::from_rows(&[&[0.6]]),
                rank: 1,
                alpha: 1.0,
            },
            auxiliary: None,
        };
        let g = Matrix::from_rows(&[&[2.0]]);
        let rho = 0.3;
        let rec = record_term_norms(0, 0, &lora, &g, rho, None).unwrap();
        let (b, a, gv): (f64, f64, f64) = (0.8, 0.6, 2.0);
        let gb = gv * a;
        let ga = b * gv;
        let f = (gb * gb + ga * ga).sqrt();
        let eps_b = rho * gb / f;
        let eps_a = rho * ga / f;
        assert!((rec.norm_b_eps_a - (b * eps_a).abs()).abs() <= 1e-12);
        assert!((rec.norm_eps_b_a - (eps_b * a).abs()).abs() <= 1e-12);
        assert!((rec.norm_eps_b_eps_a - (eps_b * eps_a).abs()).abs() <= 1e-12);
        let expected_ratio = (b * eps_a + eps_b * a).abs() / (eps_b * eps_a).abs();
        assert!((rec.ratio.unwrap() - expected_ratio).abs() <= 1e-9 * expected_ratio);
    }

    #[test]
    fn term_norms_zero_gradient_sentinel() {
        let net = adapted_net(3, 0);
        let lora = net.layers[0].adapted().unwrap();
        let g = Matrix::zeros(lora.base.rows(), lora.base.cols());
        let rec = record_term_norms(0, 0, lora, &g, 0.05, None).unwrap();
        assert_eq!(rec.norm_b_eps_a, 0.0);
        assert_eq!(rec.norm_eps_b_a, 0.0);
        assert!(rec.ratio.is_none());
    }

    #[test]
    fn trajectory_final_vs_final_is_one() {
        let net = adapted_net(4, 2);
        let s0 = ParamSnapshot::capture(0, &net);
        let mut s1 = ParamSnapshot::capture(10, &net);
        s1.primary[0] += 0.5; // make it differ a bit
        let recs = record_trajectory(&[s0, s1.clone()], &s1).unwrap();
        assert!((recs[1].cos_primary - 1.0).abs() <= 1e-12);
        for r in &recs {
            assert!(r.cos_primary >= -1.0 - 1e-12 && r.cos_primary <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn trajectory_orthogonal_vectors() {
        let a = ParamSnapshot {
            step: 0,
            primary: vec![1.0, 0.0],
            auxiliary: None,
        };
        let b = ParamSnapshot {
            step: 1,
            primary: vec![0.0, 1.0],
            auxiliary: None,
        };
        let recs = record_trajectory(&[a, b.clone()], &b).unwrap();
        assert_eq!(recs[0].cos_primary, 0.0);
    }

    #[test]
    fn landscape_zero_radius_equals_unperturbed_loss() {
        let mut net = adapted_net(5, 2);
        let batch = class_batch(&net, 32, 6);
        let base = evaluate_loss(&net, &batch, true).unwrap();
        let scan = scan_landscape_1d(&mut net, &[batch], ParamSpace::AllParams, 7, &[-0.1, 0.0, 0.1], 2).unwrap();
        for row in &scan.losses {
            assert_eq!(row[1], base);
        }
    }

    #[test]
    fn landscape_restores_network_bitwise() {
        let mut net = adapted_net(6, 2);
        let batch = class_batch(&net, 16, 7);
        let before = collect_params(&mut net, ParamSpace::AllParams);
        scan_landscape_1d(&mut net, &[batch], ParamSpace::LoraParams, 3, &[-0.5, 0.0, 0.5], 3).unwrap();
        let after = collect_params(&mut net, ParamSpace::AllParams);
        assert_eq!(before, after);
    }

    #[test]
    fn sharpness_restores_and_shrinks_with_radius() {
        let mut net = adapted_net(7, 2);
        let batch = class_batch(&net, 32, 8);
        let before = collect_params(&mut net, ParamSpace::AllParams);
        let mut rng = RngStream::new(9, 0);
        let tiny = estimate_sharpness(&mut net, &[batch.clone()], 1e-6, 16, &mut rng).unwrap();
        assert!(tiny.mean_increase.abs() <= 1e-5);
        let after = collect_params(&mut net, ParamSpace::AllParams);
        assert_eq!(before, after);
        assert!(tiny.max_increase >= tiny.mean_increase);
    }

    #[test]
    fn sharpness_quadratic_matches_analytic() {
        // pure quadratic: one linear layer d->d with W frozen-ish; loss =
        // mean_i ||x_i W^T||^2 with targets 0. With X = I (d samples of unit
        // basis), loss = ||W||_F^2 / d... easier: analytic expectation of the
        // increase for f(w) = lambda ||w||^2 under ||delta|| = rho uniform:
        // E[f(w+delta) - f(w)] = lambda rho^2 (the cross term has mean 0).
        // Build f(w) = ||w||^2 via MSE: d samples e_i, targets 0, output dim 1:
        // loss = (1/d) sum_i w_i^2 -> lambda = 1/d over the weight block, but
        // the perturbation also hits the bias. Use the formula with the
        // effective quadratic over all P params: here the bias contributes
        // (1/d)*d*delta_b^2... keep it simple with d=4 and include bias in
        // lambda accounting: f(w, b) = (1/d) sum_i (w_i + b)^2.
        // Instead check the first-order-free property numerically against a
        // direct average over the same directions, which is what the sampler
        // reports; and check the 10% analytic band for the no-bias case by
        // zeroing bias sensitivity via many samples.
        let d = 4usize;
        let spec = ModelSpec {
            layer_dims: vec![d, 1],
            activations: vec![Activation::Identity],
            loss: LossKind::MeanSquaredError,
            adapter_layers: vec![],
        };
        let mut rng = RngStream::new(10, 0);
        let mut net = Network::new(spec, &mut rng).unwrap();
        // start at w = 0, b = 0 so f is a pure quadratic in (w, b):
        // f = (1/d) sum_i (w_i + b)^2
        net.layers[0].weights = LayerWeights::Plain(Matrix::zeros(1, d));
        net.layers[0].bias = Matrix::zeros(1, 1);
        let mut inputs = Matrix::zeros(d, d);
        for i in 0..d {
            inputs.set(i, i, 1.0);
        }
        let batch = Batch::new(inputs, Matrix::zeros(d, 1)).unwrap();
        let rho = 0.2;
        let n = 1000;
        let mut srng = RngStream::new(11, 0);
        let rep = estimate_sharpness(&mut net, &[batch], rho, n, &mut srng).unwrap();
        // E over uniform sphere in P = d+1 dims: E[delta_i^2] = rho^2 / P.
        // f(delta) = (1/d) sum_i (dw_i + db)^2 ->
        // E = (1/d) * d * (E[dw^2] + E[db^2]) = 2 rho^2 / P
        let p = (d + 1) as f64;
        let expected = 2.0 * rho * rho / p;
        let err = (rep.mean_increase - expected).abs() / expected;
        assert!(err <= 0.10, "mean {} vs expected {} ({}%)", rep.mean_increase, expected, err * 100.0);
    }

    #[test]
    fn subspace_containments_hold() {
        let mut rng = RngStream::new(12, 0);
        let b = seeded_gaussian(8, 3, &mut rng, 1.0);
        let a = seeded_gaussian(3, 10, &mut rng, 1.0);
        let eps_b = seeded_gaussian(8, 3, &mut rng, 0.01);
        let eps_a = seeded_gaussian(3, 10, &mut rng, 0.01);
        let rep = check_subspaces(
            0,
            0,
            &SubspaceContext::LoraSam {
                b: &b,
                a: &a,
                eps_b: &eps_b,
                eps_a: &eps_a,
            },
        )
        .unwrap();
        assert!(rep.col_residual_rel <= 1e-10);
        // eps_B here is arbitrary (not of the G A^T form), so only the
        // column containment is guaranteed; use the structured form for rows:
        let g = seeded_gaussian(8, 10, &mut rng, 1.0);
        let eps_b_structured = g.matmul_nt(&a).unwrap().scaled(0.01);
        let rep2 = check_subspaces(
            0,
            0,
            &SubspaceContext::LoraSam {
                b: &b,
                a: &a,
                eps_b: &eps_b_structured,
                eps_a: &eps_a,
            },
        )
        .unwrap();
        assert!(rep2.row_residual_rel.unwrap() <= 1e-10);
    }

    #[test]
    fn bilora_subspace_and_overlap() {
        let mut rng = RngStream::new(13, 0);
        let b1 = seeded_gaussian(64, 8, &mut rng, 1.0);
        let b2 = seeded_gaussian(64, 8, &mut rng, 1.0);
        let a2 = seeded_gaussian(8, 32, &mut rng, 1.0);
        let rep = check_subspaces(
            0,
            0,
            &SubspaceContext::BiLora {
                b1: &b1,
                b2: &b2,
                a2: &a2,
                s2: 2.0,
            },
        )
        .unwrap();
        assert!(rep.col_residual_rel <= 1e-10);
        let ov = rep.overlap_cosine.unwrap();
        assert!(ov < 1.0 - 1e-6, "independent bases overlap {ov}");
        // identical bases overlap completely
        let same = principal_angle_overlap(&b1, &b1).unwrap();
        assert!((same - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn gap_tracking_hand_series() {
        let recs = track_generalization_gap(
            &[0, 10],
            &[1.0, 0.5],
            &[1.2, 0.9],
            &[0.9, 0.95],
            &[0.8, 0.85],
        )
        .unwrap();
        assert!((recs[0].loss_gap - 0.2).abs() <= 1e-15);
        assert!((recs[1].loss_gap - 0.4).abs() <= 1e-15);
        assert!((recs[0].metric_gap - 0.1).abs() <= 1e-12);
        let err = track_generalization_gap(&[0], &[1.0, 2.0], &[1.0], &[0.5], &[0.5]);
        assert!(err.is_err());
    }

    #[test]
    fn landscape_mirror_with_negated_direction() {
        // same seed and direction, grid negated: reading the second row
        // backwards must reproduce the first bitwise
        let mut net = adapted_net(14, 2);
        let batch = class_batch(&net, 16, 15);
        let radii: Vec<f64> = vec![-0.4, -0.2, 0.0, 0.2, 0.4];
        let scan = scan_landscape_1d(&mut net, &[batch.clone()], ParamSpace::AllParams, 21, &radii, 1).unwrap();
        let neg: Vec<f64> = radii.iter().map(|t| -t).collect();
        let scan2 = scan_landscape_1d(&mut net, &[batch], ParamSpace::AllParams, 21, &neg, 1).unwrap();
        for (x, y) in scan.losses[0].iter().zip(scan2.losses[0].iter().rev()) {
            assert_eq!(x, y);
        }
    }
}
