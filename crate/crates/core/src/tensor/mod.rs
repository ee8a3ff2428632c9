//! Dense and sparse matrices, reverse-mode autodiff, and Adam.

mod adam;
mod dense;
pub mod gradcheck;
pub mod ops;
mod sparse;
mod tape;

pub use adam::AdamState;
pub use dense::DenseMatrix;
pub use ops::{circ_corr, cosine_sim, softmax};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};

pub(crate) use dense::dot;

/// Glorot-uniform initialization.
pub fn xavier<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}
