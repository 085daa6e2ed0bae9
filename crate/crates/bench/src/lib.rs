//! Shared fixtures for the benchmarks.

use pfn_core::numerics::SeededRng;
use pfn_core::Tensor;

/// `rows × cols` matrix with standard normal entries.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
}
