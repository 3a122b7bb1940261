//! Deterministic dense linear algebra and seeded sampling primitives.
//!
//! Everything downstream builds on these types: [`Vector`] for parameter
//! points and directions, [`SymMatrix`] for curvature blocks, [`RngStream`]
//! for reproducible randomness, plus a dense symmetric eigendecomposition
//! that serves as the ground-truth oracle for the matrix-free eigensolver.

mod eigh;
mod matrix;
mod rng;
mod vector;

pub use eigh::{dense_sym_eigh, solve_spd, DENSE_SIZE_LIMIT};
pub use matrix::SymMatrix;
pub use rng::{derive_seed, random_orthogonal, sample_std_normal, RngStream};
pub use vector::Vector;
