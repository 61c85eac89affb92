//! Block-wise k-bit NormalFloat quantisation.
//!
//! A weight matrix is flattened row-major, cut into fixed-size blocks, and each
//! block is normalised by its own absolute maximum before every element is
//! snapped to the nearest level of a normal-quantile codebook. Outliers only
//! affect the scale of the block they live in.

mod codebook;
mod codec;
mod pack;
mod stats;

pub use codebook::{inverse_normal_cdf, tail_offset, NormalFloatCodebook, MAX_BITS, MIN_BITS};
pub use codec::{dequantise, quantise_block, quantise_matrix, QuantisedMatrix, DEFAULT_BLOCK_SIZE};
pub use pack::{pack_codes, packed_len, unpack_codes};
pub use stats::{compression_stats, QuantStats};
