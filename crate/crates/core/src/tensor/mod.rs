//! Dense `f64` linear algebra, softmax/top-k and the seeded random stream.
//!
//! Everything here is single-threaded with fixed reduction order.

mod matrix;
pub mod rng;
mod vector;

pub use matrix::{Matrix, PIVOT_FLOOR};
pub use rng::{seeded_gaussian, RngStream};
pub use vector::{dot, norm_sq, softmax, top_k_select};
