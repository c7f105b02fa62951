//! Equivariant and stable positional encodings for graphs, with numerical
//! verifiers for the perturbation bounds they rest on.

pub mod error;
pub mod graph;
pub mod lab;
pub mod linalg;
pub mod nn;
pub mod oracles;
pub mod pe;
pub mod peg;
pub mod reports;
pub mod spe;
pub mod spectral;

pub use error::{Error, Result};
pub use graph::{DegreeInfo, Graph, SymMatrix};
pub use linalg::Mat;
pub use spectral::{EigenDecomposition, GapReport, OrthogonalMatrix, Permutation, SignMatrix};
