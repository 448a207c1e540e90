//! Orthogonal attention at desk scale.
//!
//! This crate keeps the query/key/value projections of a small vision
//! transformer exactly on the orthogonal manifold without constrained
//! optimization: each weight is stored as a raw square generator, mapped to
//! a skew-symmetric matrix by `W - W^T`, and carried to the orthogonal group
//! by the rational map `h(X) = 2(E + X)^-1 - E` (or the matrix exponential,
//! for the baseline). The map is differentiable, so plain SGD on the raw
//! generators trains weights that preserve inner products, lengths, angles,
//! and distances by construction.
//!
//! The pieces, bottom up:
//!
//! * [`matrix`]: dense `f64` matrices with deterministic kernels (fixed
//!   summation order, LU inverse with partial pivoting).
//! * [`autodiff`]: a define-by-run tape whose op set covers everything the
//!   model needs, inversion included, plus a finite-difference checker.
//! * [`orthogonal`]: the skew/Cayley/exponential toolkit with typed
//!   manifold membership, tangent projection, and QR retraction.
//! * [`model`]: patch embedding, head-banded orthogonal self-attention,
//!   encoder blocks, and parameter accounting.
//! * [`data`]: the synthetic stripe task, IDX ingestion, augmentation, and
//!   the seeded generator behind every random choice.
//! * [`training`]: cross-entropy, SGD with momentum, the Riemannian SGD
//!   baseline, the deterministic training loop, and noise-robustness
//!   evaluation.
//! * [`cli`]: the `orthoattn` binary surface.
//!
//! ```
//! use orthoattn::matrix::Matrix;
//! use orthoattn::orthogonal::{cayley, orthogonality_error, skew_symmetrize};
//!
//! let raw = Matrix::from_vec(2, 2, vec![0.3, -0.8, 0.1, 0.5])?;
//! let w = cayley(&skew_symmetrize(&raw)?);
//! assert!(orthogonality_error(w.as_matrix())? <= 1e-10 * 2f64.sqrt());
//! # Ok::<(), orthoattn::Error>(())
//! ```

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod matrix;
pub mod model;
pub mod orthogonal;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;

// The guide's code blocks double as doctests so the book cannot drift from
// the crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/matrices.md")]
    mod matrices {}
    #[doc = include_str!("../../../book/src/orthogonal-maps.md")]
    mod orthogonal_maps {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
