//! Dense arrays, the seeded generator, and the finite-difference checker.

mod array;
mod digest;
mod gradcheck;
mod rng;

pub use array::{ensure_finite, DenseArray};
pub use digest::{digest_f64, hex};
pub use gradcheck::{finite_diff_coords, finite_diff_grad, relative_error};
pub use rng::{derive_seed, gaussian_sample, RngState};
