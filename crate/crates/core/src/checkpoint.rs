//! Binary model checkpoints.
//!
//! Container layout (all integers little-endian u64 unless noted):
//!
//! ```text
//! magic      8 bytes  b"LORALAB\0"
//! version    u32
//! kind       u8       0 = full network, 1 = adapter-only (primary pairs)
//! spec       layer dims, activation codes, loss code, adapter placements
//! payload    per-layer matrices in declared order
//! ```
//!
//! Matrices are stored as `rows: u64, cols: u64` followed by row-major f64
//! little-endian data. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adapters::{AdapterPair, LoRALinear};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{Activation, Layer, LayerWeights, LossKind, ModelSpec, Network};

const MAGIC: &[u8; 8] = b"LORALAB\0";
const VERSION: u32 = 1;

const KIND_NETWORK: u8 = 0;
const KIND_ADAPTERS: u8 = 1;

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Tanh => 1,
        Activation::Identity => 2,
    }
}

fn act_from(code: u8) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Tanh),
        2 => Ok(Activation::Identity),
        c => Err(Error::Checkpoint(format!("unknown activation code {c}"))),
    }
}

fn loss_code(l: LossKind) -> u8 {
    match l {
        LossKind::SoftmaxCrossEntropy => 0,
        LossKind::MeanSquaredError => 1,
    }
}

fn loss_from(code: u8) -> Result<LossKind> {
    match code {
        0 => Ok(LossKind::SoftmaxCrossEntropy),
        1 => Ok(LossKind::MeanSquaredError),
        c => Err(Error::Checkpoint(format!("unknown loss code {c}"))),
    }
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn matrix(&mut self, m: &Matrix) -> Result<()> {
        self.u64(m.rows() as u64)?;
        self.u64(m.cols() as u64)?;
        for v in m.data() {
            self.f64(*v)?;
        }
        Ok(())
    }

    fn spec(&mut self, spec: &ModelSpec) -> Result<()> {
        self.u64(spec.layer_dims.len() as u64)?;
        for &d in &spec.layer_dims {
            self.u64(d as u64)?;
        }
        self.u64(spec.activations.len() as u64)?;
        for &a in &spec.activations {
            self.u8(act_code(a))?;
        }
        self.u8(loss_code(spec.loss))?;
        self.u64(spec.adapter_layers.len() as u64)?;
        for &i in &spec.adapter_layers {
            self.u64(i as u64)?;
        }
        Ok(())
    }
}

struct ReaderWrap<R: Read> {
    inner: R,
}

impl<R: Read> ReaderWrap<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.inner.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        if rows.saturating_mul(cols) > 1 << 30 {
            return Err(Error::Checkpoint(format!("implausible matrix shape {rows}x{cols}")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Matrix::from_vec(rows, cols, data)
    }

    fn spec(&mut self) -> Result<ModelSpec> {
        let n_dims = self.u64()? as usize;
        let layer_dims = (0..n_dims).map(|_| self.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let n_act = self.u64()? as usize;
        let activations = (0..n_act).map(|_| self.u8().and_then(act_from)).collect::<Result<_>>()?;
        let loss = loss_from(self.u8()?)?;
        let n_ad = self.u64()? as usize;
        let adapter_layers = (0..n_ad).map(|_| self.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        Ok(ModelSpec {
            layer_dims,
            activations,
            loss,
            adapter_layers,
        })
    }
}

fn header<W: Write>(w: &mut Writer<W>, kind: u8) -> Result<()> {
    w.inner.write_all(MAGIC)?;
    w.u32(VERSION)?;
    w.u8(kind)?;
    Ok(())
}

fn check_header<R: Read>(r: &mut ReaderWrap<R>, expected_kind: u8) -> Result<()> {
    let mut magic = [0u8; 8];
    r.inner.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic tag".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind {kind} does not match expected {expected_kind}"
        )));
    }
    Ok(())
}

/// Save a full network (plain and adapted layers alike).
pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = Writer { inner: BufWriter::new(file) };
    header(&mut w, KIND_NETWORK)?;
    w.spec(&net.spec)?;
    w.u64(net.layers.len() as u64)?;
    for layer in &net.layers {
        match &layer.weights {
            LayerWeights::Plain(m) => {
                w.u8(0)?;
                w.matrix(m)?;
            }
            LayerWeights::Adapted(l) => {
                w.u8(if l.auxiliary.is_some() { 2 } else { 1 })?;
                w.matrix(&l.base)?;
                w.u64(l.primary.rank as u64)?;
                w.f64(l.primary.alpha)?;
                w.matrix(&l.primary.b)?;
                w.matrix(&l.primary.a)?;
                if let Some(aux) = &l.auxiliary {
                    w.u64(aux.rank as u64)?;
                    w.f64(aux.alpha)?;
                    w.matrix(&aux.b)?;
                    w.matrix(&aux.a)?;
                }
            }
        }
        w.matrix(&layer.bias)?;
    }
    w.inner.flush()?;
    Ok(())
}

/// Load a full network checkpoint.
pub fn load_network(path: &Path) -> Result<Network> {
    let file = File::open(path)?;
    let mut r = ReaderWrap { inner: BufReader::new(file) };
    check_header(&mut r, KIND_NETWORK)?;
    let spec = r.spec()?;
    let n_layers = r.u64()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u8()?;
        let weights = match tag {
            0 => LayerWeights::Plain(r.matrix()?),
            1 | 2 => {
                let base = r.matrix()?;
                let rank = r.u64()? as usize;
                let alpha = r.f64()?;
                let b = r.matrix()?;
                let a = r.matrix()?;
                let primary = AdapterPair { b, a, rank, alpha };
                let auxiliary = if tag == 2 {
                    let rank = r.u64()? as usize;
                    let alpha = r.f64()?;
                    let b = r.matrix()?;
                    let a = r.matrix()?;
                    Some(AdapterPair { b, a, rank, alpha })
                } else {
                    None
                };
                LayerWeights::Adapted(LoRALinear { base, primary, auxiliary })
            }
            t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
        };
        let bias = r.matrix()?;
        layers.push(Layer { weights, bias });
    }
    spec.validate()?;
    let mut rng = crate::linalg::RngStream::new(0, 0);
    let mut net = Network::new(spec.clone(), &mut rng)?;
    net.layers = layers;
    net.spec = spec;
    net.reset_backward_count();
    Ok(net)
}

/// Save only the primary adapter pairs (the merged-artifact workflow): the
/// placement indices plus `(rank, alpha, B, A)` per adapted layer.
pub fn save_adapters(net: &Network, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = Writer { inner: BufWriter::new(file) };
    header(&mut w, KIND_ADAPTERS)?;
    let adapted: Vec<(usize, &LoRALinear)> = net
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.adapted().map(|a| (i, a)))
        .collect();
    w.u64(adapted.len() as u64)?;
    for (idx, lora) in adapted {
        w.u64(idx as u64)?;
        w.u64(lora.primary.rank as u64)?;
        w.f64(lora.primary.alpha)?;
        w.matrix(&lora.primary.b)?;
        w.matrix(&lora.primary.a)?;
    }
    w.inner.flush()?;
    Ok(())
}

/// Apply an adapter-only checkpoint onto a network whose base weights match
/// the shapes it was trained against.
pub fn load_adapters_into(net: &mut Network, path: &Path) -> Result<()> {
    let file = File::open(path)?;
    let mut r = ReaderWrap { inner: BufReader::new(file) };
    check_header(&mut r, KIND_ADAPTERS)?;
    let n = r.u64()? as usize;
    let mut placements = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = r.u64()? as usize;
        let rank = r.u64()? as usize;
        let alpha = r.f64()?;
        let b = r.matrix()?;
        let a = r.matrix()?;
        let layer = net
            .layers
            .get_mut(idx)
            .ok_or_else(|| Error::Checkpoint(format!("adapter layer index {idx} out of range")))?;
        let base = match &layer.weights {
            LayerWeights::Plain(w) => w.clone(),
            LayerWeights::Adapted(l) => l.base.clone(),
        };
        if base.rows() != b.rows() || base.cols() != a.cols() {
            return Err(Error::Checkpoint(format!(
                "adapter shapes {}x{} do not fit layer {idx} ({})",
                b.rows(),
                a.cols(),
                base.shape_str()
            )));
        }
        layer.weights = LayerWeights::Adapted(LoRALinear {
            base,
            primary: AdapterPair { b, a, rank, alpha },
            auxiliary: None,
        });
        placements.push(idx);
    }
    net.spec.adapter_layers = placements;
    Ok(())
}
