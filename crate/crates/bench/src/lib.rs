//! Shared inputs for the benchmarks.

use spectral_pe::graph::{normalized_laplacian, random_connected_graph};
use spectral_pe::{Graph, SymMatrix};

/// A connected random graph and its normalized Laplacian.
pub fn fixture(n: usize, seed: u64) -> (Graph, SymMatrix) {
    let g = random_connected_graph(n, 0.1, seed).expect("valid probability");
    let l = normalized_laplacian(&g).expect("connected");
    (g, l)
}
