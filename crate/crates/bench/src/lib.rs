//! Shared setup for the step-time benchmarks: a mid-size classifier and one
//! synthetic batch, identical across methods.

use bilora_core::adapters::attach_adapters;
use bilora_core::linalg::{seeded_gaussian, Matrix, RngStream};
use bilora_core::net::{Activation, Batch, LossKind, ModelSpec, Network};
use bilora_core::optim::{Method, OptimConfig, OptimState};
use rand::Rng;

pub const BENCH_DIMS: [usize; 4] = [512, 1024, 512, 2];
pub const BENCH_BATCH: usize = 128;

pub fn bench_network(method: Method, seed: u64) -> Network {
    let spec = ModelSpec {
        layer_dims: BENCH_DIMS.to_vec(),
        activations: vec![Activation::Relu, Activation::Relu, Activation::Identity],
        loss: LossKind::SoftmaxCrossEntropy,
        adapter_layers: vec![],
    };
    let mut rng = RngStream::new(seed, 0);
    let mut net = Network::new(spec, &mut rng).expect("valid spec");
    if method.uses_adapters() {
        let aux_rank = if method == Method::BiLora { 8 } else { 0 };
        attach_adapters(&mut net, &[0, 1, 2], 8, 16.0, aux_rank, 16.0, &mut rng).expect("adapters fit");
    }
    net
}

pub fn bench_batch(net: &Network, seed: u64) -> Batch {
    let mut rng = RngStream::new(seed, 1);
    let inputs = seeded_gaussian(BENCH_BATCH, net.input_dim(), &mut rng, 1.0);
    let mut targets = Matrix::zeros(BENCH_BATCH, net.output_dim());
    for i in 0..BENCH_BATCH {
        let c = rng.gen_range(0..net.output_dim());
        targets.set(i, c, 1.0);
    }
    Batch::new(inputs, targets).expect("shapes agree")
}

pub fn bench_optim_config(method: Method) -> (OptimConfig, OptimState) {
    (OptimConfig::new(method, 5e-4, 0.05), OptimState::new())
}
