//! Shared fixtures for the pipeline benchmarks.

use cafcn_core::data::{generate_pair, SyntheticSpec};
use cafcn_core::network::{NetworkConfig, NetworkParams};
use cafcn_core::tensor::Tensor;

/// A trained-shaped network with a non-trivial attention gate.
pub fn bench_params(config: &NetworkConfig) -> NetworkParams {
    let mut params = NetworkParams::init(config, 0x5EED).unwrap();
    params.attention.gamma.values_mut()[0] = 0.3;
    params
}

/// Synthetic images at the configured resolution.
pub fn bench_images(config: &NetworkConfig, n: usize) -> Vec<Tensor> {
    (0..n)
        .map(|i| {
            let spec = SyntheticSpec {
                image_size: config.input_size,
                seed: 1000 + i as u64,
                ..SyntheticSpec::default()
            };
            generate_pair(&spec).unwrap().image1
        })
        .collect()
}
