//! Shared fixtures for the criterion benchmarks.

use dualtta::model::{build_reference_net, ModelState};
use dualtta::{RngStream, Tensor};

/// A freshly initialized reference network for three-channel binary data.
pub fn model(seed: u64) -> ModelState {
    build_reference_net(2, 3, seed).expect("reference net")
}

/// Gaussian images shaped like the synthetic dataset.
pub fn images(batch: usize, seed: u64) -> Tensor {
    RngStream::new(seed).gaussian_tensor(&[batch, 3, 28, 28])
}
