//! Dense matrices, the seeded random stream, and little-endian binary primitives.

pub mod binio;
mod matrix;
mod rng;

pub use matrix::{gaussian_fill, matmul, Matrix};
pub use rng::Rng;
